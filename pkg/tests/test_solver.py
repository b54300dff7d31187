import warnings

import numpy as np
import pytest

from carted.errors import DivergenceError, MonotonicityWarning
from carted.linalg import topological_order
from carted.metrics import sim
from carted.solver import (SolverConfig, best_decomposition, fit, fit_parafac2, fit_two_step,
                           warm_start_v)
from carted.synthetic import assemble_instance, gen_factors
from carted.tensor import IrregularTensor, fit_loss

pytestmark = pytest.mark.filterwarnings("ignore::carted.errors.MonotonicityWarning")

QUIET = dict(action="ignore", category=MonotonicityWarning)


def parafac2_data(seed=0, k=15, j=6, r=2):
    f = gen_factors(k, j, r, visit_range=(6, 9), seed=seed, q_mode="haar")
    return IrregularTensor(tuple((u * s) @ f.V.T for u, s in zip(f.U, f.S))), f


def small_instance(seed=0):
    return assemble_instance(k_slices=12, j_features=6, rank=3, visit_range=(6, 9), seed=seed)


def small_cfg(**kw):
    base = dict(rank=3, max_iters=8, max_inner=20, causal_max_outer=60, rho_scale=8.0)
    base.update(kw)
    return SolverConfig(**base)


def test_config_validation_and_round_trip():
    cfg = SolverConfig(rank=2, lambda_w=0.1)
    assert SolverConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.replace(seed=5).seed == 5 and cfg.seed == 0
    for bad in (dict(rank=0), dict(lag=-1), dict(rho_scale=0), dict(mode="other"),
                dict(w_init="random")):
        with pytest.raises(ValueError):
            SolverConfig(**bad)
    with pytest.raises(ValueError, match="unknown"):
        SolverConfig.from_dict({"bogus": 1})


def test_plain_fit_recovers_exact_parafac2_data():
    x, truth = parafac2_data()
    cfg = SolverConfig(rank=2, max_iters=300, rel_tol=1e-10, rho_scale=8.0)
    with warnings.catch_warnings():
        warnings.filterwarnings(**QUIET)
        f, graph, report = fit_parafac2(x, cfg)
    assert graph is None
    assert sim(truth.V, f.V) >= 0.99
    norm = 0.5 * sum(float(np.sum(xk * xk)) for xk in x)
    assert fit_loss(x, f.U, f.S, f.V) <= 1e-3 * norm


def test_joint_fit_output_contract():
    gt = small_instance()
    with warnings.catch_warnings():
        warnings.filterwarnings(**QUIET)
        f, g, report = fit(gt.tensor, small_cfg())
    assert report.termination in ("converged", "max_iters")
    assert report.iterations == len(report.trace) <= 8
    assert report.h is not None and report.h == report.trace[-1].h
    assert report.orthonormality_error <= 1e-8 and report.projection_error <= 1e-8
    for q, u in zip(f.Q, f.U):
        assert np.linalg.norm(q.T @ q - np.eye(3)) <= 1e-8
        np.testing.assert_allclose(u, q @ f.H)
    if report.causal_converged:
        assert report.h <= 1e-8
        assert topological_order(np.abs(g.W) > 0.3) is not None
    header, rows = report.trace_table()
    assert header[0] == "iteration" and len(rows) == report.iterations


def test_fit_is_deterministic():
    gt = small_instance(1)
    cfg = small_cfg(max_iters=3)
    with warnings.catch_warnings():
        warnings.filterwarnings(**QUIET)
        a = fit(gt.tensor, cfg)
        b = fit(gt.tensor, cfg)
    np.testing.assert_array_equal(a.factors.V, b.factors.V)
    np.testing.assert_array_equal(a.graph.W, b.graph.W)
    assert [r.objective for r in a.report.trace] == [r.objective for r in b.report.trace]


def test_two_step_mode():
    gt = small_instance(2)
    cfg = small_cfg(mode="two_step")
    with warnings.catch_warnings():
        warnings.filterwarnings(**QUIET)
        f, g, report = fit(gt.tensor, cfg)
    assert g is not None and g.P == 1
    assert all(row.causal_iterations == 0 for row in report.trace)
    assert report.causal_iterations > 0


def test_warm_start_threshold_and_shape():
    gt = small_instance(3)
    cfg = small_cfg(max_iters=5)
    with warnings.catch_warnings():
        warnings.filterwarnings(**QUIET)
        best, losses = best_decomposition(gt.tensor, cfg, n_runs=2)
        v = warm_start_v(gt.tensor, cfg, n_runs=2, threshold=0.2)
    assert len(losses) == 2
    assert fit_loss(gt.tensor, best.U, best.S, best.V) == pytest.approx(min(losses))
    assert v.shape == (6, 3)
    col_max = np.abs(v).max(axis=0)
    nz = v != 0
    assert np.all(np.abs(v)[nz] >= 0.2 * np.broadcast_to(col_max, v.shape)[nz])
    with pytest.raises(ValueError):
        best_decomposition(gt.tensor, cfg, n_runs=0)
    with pytest.raises(ValueError, match="warm-start"):
        fit(gt.tensor, cfg.replace(warm_start_V=np.ones((5, 3))))


def test_input_checks():
    gt = small_instance(4)
    with pytest.raises(ValueError, match="rank"):
        fit(gt.tensor, small_cfg(rank=7))
    with pytest.raises(ValueError, match="lag"):
        fit(gt.tensor, small_cfg(lag=6))


def test_divergence_carries_report():
    x = IrregularTensor((np.full((4, 3), np.nan), np.ones((5, 3))))
    with pytest.raises(DivergenceError) as info:
        fit_parafac2(x, SolverConfig(rank=2, max_iters=3))
    assert info.value.report is not None
    assert info.value.report.termination == "diverged"
