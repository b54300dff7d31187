"""Outer block-coordinate loop: U block, S block, V, causal block."""

from __future__ import annotations

import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

from .causal import CausalGraph, run_causal_block
from .errors import DivergenceError, MonotonicityWarning
from .linalg import h_acyclicity
from .parafac2 import TensorAdmmState, penalty_rho, run_s_block, run_u_block, update_V
from .tensor import Parafac2Factors, TrajectorySet, causal_loss, fit_loss


@dataclass
class SolverConfig:
    """Hyperparameters of a fit.

    ``rho_scale`` multiplies the trace-based penalty rule of the tensor
    blocks. ``w_init`` is ``"identity"`` (the causal regularizer then
    vanishes until the first causal block) or ``"zero"``.
    """

    rank: int = 4
    lag: int = 1
    lambda_w: float = 0.5
    lambda_a: float = 0.5
    tau_w: float = 0.3
    tau_a: float = 0.1
    inner_tol: float = 1e-4
    inner_loss_tol: float = 1e-6
    max_inner: int = 50
    max_iters: int = 100
    rel_tol: float = 1e-6
    patience: int = 3
    causal_max_outer: int = 1000
    h_tol: float = 1e-8
    rho1: float = 1.0
    rho2: float = 1.0
    phi1: float = 1.6
    phi2: float = 1.6
    rho_cap: float = 1e16
    rho_scale: float = 1.0
    mode: str = "joint"
    w_init: str = "identity"
    local_free_diagonal: bool = False
    warm_start_V: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be at least 1")
        if self.lag < 0:
            raise ValueError("lag must be non-negative")
        for name in ("inner_tol", "inner_loss_tol", "rel_tol", "h_tol", "rho_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.mode not in ("joint", "two_step"):
            raise ValueError(f"mode must be 'joint' or 'two_step', got {self.mode!r}")
        if self.w_init not in ("identity", "zero"):
            raise ValueError(f"w_init must be 'identity' or 'zero', got {self.w_init!r}")
        if self.warm_start_V is not None:
            self.warm_start_V = np.asarray(self.warm_start_V, dtype=float)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "warm_start_V"}
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown solver options: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return SolverConfig(**d)


@dataclass
class TraceRow:
    iteration: int
    fit_loss: float
    causal_loss: float
    objective: float
    h: float
    gap_u_tilde: float
    gap_u_hat: float
    gap_s: float
    u_iterations: int
    s_iterations: int
    causal_iterations: int
    causal_converged: bool
    lagrangian_increases: int


@dataclass
class FitReport:
    """Per-outer-iteration diagnostics of a fit.

    ``orthonormality_error`` is ``max_k ||Q_k^T Q_k - I||_F`` and
    ``projection_error`` is ``max_k ||Û_k - Q_k H||_F``, both at termination.
    """

    trace: list = field(default_factory=list)
    termination: str = ""
    wall_time: float = 0.0
    causal_iterations: int = 0
    causal_converged: bool | None = None
    h: float | None = None
    orthonormality_error: float | None = None
    projection_error: float | None = None

    @property
    def iterations(self):
        return len(self.trace)

    def trace_table(self):
        """Trace as ``(header, rows)`` for tabular export."""
        header = [f.name for f in fields(TraceRow)]
        return header, [[getattr(row, name) for name in header] for row in self.trace]

    def to_dict(self):
        d = asdict(self)
        d["iterations"] = self.iterations
        return d


class FitResult(NamedTuple):
    factors: Parafac2Factors
    graph: CausalGraph | None
    report: FitReport


def _init_factors(x, cfg):
    rng = np.random.default_rng(cfg.seed)
    r = cfg.rank
    u_list = [rng.random((i_k, r)) for i_k in x.visit_counts]
    v = rng.random((x.J, r))
    if cfg.warm_start_V is not None:
        if cfg.warm_start_V.shape != (x.J, r):
            raise ValueError(f"warm-start V has shape {cfg.warm_start_V.shape}, expected {(x.J, r)}")
        v = cfg.warm_start_V.copy()
    return Parafac2Factors(U=u_list, S=[np.ones(r) for _ in u_list], V=v)


def _projected(factors):
    out = factors.copy()
    out.U = [q @ factors.H for q in factors.Q]
    return out


def _check_inputs(x, cfg, causal):
    if cfg.rank > x.J:
        raise ValueError(f"rank {cfg.rank} exceeds the feature dimension {x.J}")
    if causal and cfg.lag >= min(x.visit_counts):
        raise ValueError(f"lag order {cfg.lag} must be below the shortest slice length {min(x.visit_counts)}")


def _causal_kwargs(cfg):
    return dict(lambda_w=cfg.lambda_w, lambda_a=cfg.lambda_a, max_outer=cfg.causal_max_outer,
                h_tol=cfg.h_tol, free_diagonal=cfg.local_free_diagonal, rho1=cfg.rho1,
                rho2=cfg.rho2, phi1=cfg.phi1, phi2=cfg.phi2, rho_cap=cfg.rho_cap)


def _outer_loop(x, cfg, causal):
    """Shared loop; ``causal=False`` is a plain PARAFAC2 fit."""
    start = time.perf_counter()
    _check_inputs(x, cfg, causal)
    factors = _init_factors(x, cfg)
    graph = CausalGraph.empty(cfg.rank, cfg.lag, cfg.w_init) if causal else None
    state = TensorAdmmState.initialize(factors)
    report = FitReport()
    kw = dict(tol=cfg.inner_tol, loss_tol=cfg.inner_loss_tol, max_inner=cfg.max_inner)
    prev, streak = None, 0
    violations = 0
    try:
        for it in range(1, cfg.max_iters + 1):
            rho = np.array([penalty_rho(s, factors.V, u) for u, s in zip(factors.U, factors.S)])
            state.rescale_u_duals(cfg.rho_scale * rho[:, 0])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", MonotonicityWarning)
                u_rep = run_u_block(x, factors, graph, state, **kw)
                rho = np.array([penalty_rho(s, factors.V, u) for u, s in zip(factors.U, factors.S)])
                state.rescale_s_duals(cfg.rho_scale * rho[:, 1])
                s_rep = run_s_block(x, factors, graph, state, **kw)
            factors.V = update_V(x, factors.U, factors.S)

            c_iters, c_conv = 0, False
            if causal:
                traj = TrajectorySet.from_factors(factors)
                res = run_causal_block(traj, graph, **_causal_kwargs(cfg))
                graph = res.graph
                c_iters, c_conv = res.report.iterations, res.report.converged

            fl = fit_loss(x, factors.U, factors.S, factors.V)
            cl, h, obj = 0.0, 0.0, fl
            if causal:
                cl = causal_loss(TrajectorySet.from_factors(factors), graph.W, graph.A)
                h = h_acyclicity(graph.W)
                obj = fl + cl + cfg.lambda_w * np.abs(graph.W).sum() + cfg.lambda_a * sum(
                    np.abs(a).sum() for a in graph.A)
            if not np.isfinite(obj):
                raise DivergenceError(f"non-finite objective at outer iteration {it}", report)
            n_viol = u_rep.monotonicity_violations + s_rep.monotonicity_violations
            violations += n_viol
            last_u = u_rep.gaps[-1] if u_rep.gaps else (0.0, 0.0)
            last_s = s_rep.gaps[-1] if s_rep.gaps else (0.0,)
            report.trace.append(TraceRow(
                iteration=it, fit_loss=fl, causal_loss=cl, objective=float(obj), h=h,
                gap_u_tilde=last_u[0], gap_u_hat=last_u[1], gap_s=last_s[0],
                u_iterations=u_rep.iterations, s_iterations=s_rep.iterations,
                causal_iterations=c_iters, causal_converged=c_conv, lagrangian_increases=n_viol))

            if prev is not None and abs(obj - prev) <= cfg.rel_tol * abs(prev):
                streak += 1
            else:
                streak = 0
            prev = obj
            if streak >= cfg.patience:
                report.termination = "converged"
                break
        else:
            report.termination = "max_iters"
    except DivergenceError as exc:
        report.termination = "diverged"
        report.wall_time = time.perf_counter() - start
        exc.report = report
        raise
    if violations:
        warnings.warn(f"inner augmented Lagrangians increased {violations} times; "
                      "consider a larger rho_scale", MonotonicityWarning, stacklevel=3)
    r = factors.rank
    report.orthonormality_error = max(float(np.linalg.norm(q.T @ q - np.eye(r))) for q in factors.Q)
    report.projection_error = max(float(np.linalg.norm(uh - q @ factors.H))
                                  for uh, q in zip(state.U_hat, factors.Q))
    report.wall_time = time.perf_counter() - start
    if causal:
        report.causal_iterations = report.trace[-1].causal_iterations
        report.causal_converged = report.trace[-1].causal_converged
        report.h = report.trace[-1].h
    return _projected(factors), graph, report


def fit_parafac2(x, cfg):
    """PARAFAC2 fit with the causal regularizer disabled."""
    factors, _, report = _outer_loop(x, cfg, causal=False)
    return FitResult(factors, None, report)


def fit(x, cfg):
    """Joint fit of the PARAFAC2 factors and the temporal graph.

    Each outer iteration runs the U block, the S block, the V update and a
    full causal block (with penalties and duals restarted from their initial
    values). Stops when the relative change of the joint objective stays
    below ``cfg.rel_tol`` for ``cfg.patience`` iterations.

    Returns
    -------
    FitResult
        ``(factors, graph, report)``. ``factors.U`` is the projected
        ``Q_k H`` representation.
    """
    if cfg.mode == "two_step":
        return fit_two_step(x, cfg)
    return FitResult(*_outer_loop(x, cfg, causal=True))


def fit_two_step(x, cfg):
    """Plain PARAFAC2 fit, then one causal block on the truncated trajectories.

    Every trajectory is cut to the shortest slice length before the causal
    block.
    """
    start = time.perf_counter()
    _check_inputs(x, cfg, causal=True)
    factors, _, report = _outer_loop(x, cfg, causal=False)
    shortest = min(x.visit_counts)
    traj = [t[:shortest] for t in TrajectorySet.from_factors(factors)]
    res = run_causal_block(traj, CausalGraph.empty(cfg.rank, cfg.lag, cfg.w_init),
                           **_causal_kwargs(cfg))
    report.causal_iterations = res.report.iterations
    report.causal_converged = res.report.converged
    report.h = h_acyclicity(res.graph.W)
    report.wall_time = time.perf_counter() - start
    return FitResult(factors, res.graph, report)


def best_decomposition(x, cfg, n_runs=3):
    """Best of ``n_runs`` plain PARAFAC2 fits (seeds ``cfg.seed``, ``cfg.seed + 1``, ...).

    Returns the winning factors and the fit loss of every run.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    best, losses = None, []
    for i in range(n_runs):
        f, _, _ = fit_parafac2(x, cfg.replace(seed=cfg.seed + i, warm_start_V=None))
        loss = fit_loss(x, f.U, f.S, f.V)
        losses.append(loss)
        if best is None or loss < min(losses[:-1]):
            best = f
    return best, losses


def warm_start_v(x, cfg, n_runs=3, threshold=0.1):
    """Thresholded ``V`` of the best of ``n_runs`` plain decompositions.

    Entries below ``threshold`` times their column's largest magnitude are
    zeroed.
    """
    best, _ = best_decomposition(x, cfg, n_runs)
    v = best.V.copy()
    cut = threshold * np.abs(v).max(axis=0, keepdims=True)
    v[np.abs(v) < cut] = 0.0
    return v
