"""Joint PARAFAC2 decomposition and temporal causal discovery for irregular tensors."""

from .causal import CausalGraph, run_causal_block
from .cpn import CpnSummary, summarize_cpn
from .errors import (CyclicGraphError, DegenerateWarning, DimensionError, DivergenceError,
                     MonotonicityWarning, NumericalError)
from .metrics import MetricsReport, cpi, evaluate, graph_metrics, rr, sim
from .solver import FitReport, FitResult, SolverConfig, fit, fit_parafac2, fit_two_step, warm_start_v
from .synthetic import GroundTruth, SimulationParams, assemble_instance
from .tensor import IrregularTensor, Parafac2Factors, TrajectorySet, joint_objective

__all__ = [
    "CausalGraph", "CpnSummary", "CyclicGraphError", "DegenerateWarning", "DimensionError",
    "DivergenceError", "FitReport", "FitResult", "GroundTruth", "IrregularTensor", "MetricsReport",
    "MonotonicityWarning", "NumericalError", "Parafac2Factors", "SimulationParams", "SolverConfig",
    "TrajectorySet", "assemble_instance", "cpi", "evaluate", "fit", "fit_parafac2", "fit_two_step",
    "graph_metrics", "joint_objective", "rr", "run_causal_block", "sim", "summarize_cpn",
    "warm_start_v",
]
