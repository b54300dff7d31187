"""Factor-recovery and graph-recovery metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DimensionError


def _unit_columns(v, name):
    v = np.asarray(v, dtype=float)
    norms = np.linalg.norm(v, axis=0)
    if np.any(norms == 0):
        raise ValueError(f"{name} has a zero column; cosine similarity is undefined")
    return v / norms


def cosine_matrix(v_true, v_est):
    """``C[i, j]`` is the cosine between true column ``i`` and estimated column ``j``."""
    if np.shape(v_true)[0] != np.shape(v_est)[0]:
        raise DimensionError(f"row mismatch: {np.shape(v_true)} vs {np.shape(v_est)}")
    return _unit_columns(v_true, "v_true").T @ _unit_columns(v_est, "v_est")


def sim(v_true, v_est):
    """Mean over true columns of the best cosine against any estimated column."""
    if np.shape(v_true) != np.shape(v_est):
        raise DimensionError(f"shape mismatch: {np.shape(v_true)} vs {np.shape(v_est)}")
    return float(np.mean(cosine_matrix(v_true, v_est).max(axis=1)))


def cpi(u_list, h_true):
    """Cross-product invariance ``1 - sum_k ||U_k^T U_k - H^T H||^2 / sum_k ||H^T H||^2``."""
    g = np.asarray(h_true, dtype=float).T @ np.asarray(h_true, dtype=float)
    den = len(u_list) * float(np.sum(g * g))
    if den == 0:
        raise ValueError("H^T H is zero")
    num = sum(float(np.sum((u.T @ u - g) ** 2)) for u in u_list)
    return 1.0 - num / den


def rr(t_est, t_true):
    """Gram recovery ``1 - sum_k ||T̂_k^T T̂_k - T_k^T T_k||^2 / sum_k ||T_k^T T_k||^2``."""
    t_est, t_true = list(t_est), list(t_true)
    if len(t_est) != len(t_true):
        raise DimensionError(f"{len(t_est)} estimated slices vs {len(t_true)} true slices")
    num = den = 0.0
    for a, b in zip(t_est, t_true):
        if a.shape != b.shape:
            raise DimensionError(f"trajectory shape mismatch: {a.shape} vs {b.shape}")
        gb = b.T @ b
        num += float(np.sum((a.T @ a - gb) ** 2))
        den += float(np.sum(gb * gb))
    if den == 0:
        raise ValueError("true trajectory Grams are all zero")
    return 1.0 - num / den


class GraphMetrics(NamedTuple):
    shd: int
    tpr: float
    fdr: float
    tp: int
    fp: int
    fn: int
    tpr_undefined: bool
    fdr_undefined: bool


def graph_metrics(g_true, g_est, temporal=False):
    """SHD, TPR and FDR of an estimated binary adjacency.

    ``g[i, j]`` marks an edge ``i -> j``. For contemporaneous graphs
    (``temporal=False``) the SHD counts each node pair whose edge pattern
    differs once, so a reversed edge costs 1. Lagged graphs have a fixed
    direction, so their SHD is the entrywise Hamming distance and the
    matrices may be non-square (stacked lags).

    An empty estimate has FDR 0 and an empty truth has TPR 1; both cases are
    flagged.
    """
    t = np.asarray(g_true) != 0
    e = np.asarray(g_est) != 0
    if t.shape != e.shape:
        raise DimensionError(f"shape mismatch: {t.shape} vs {e.shape}")
    if temporal:
        shd = int(np.sum(t != e))
    else:
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise DimensionError(f"expected square adjacency, got {t.shape}")
        if np.any(np.diag(t)) or np.any(np.diag(e)):
            raise ValueError("contemporaneous graphs must have an empty diagonal")
        iu = np.triu_indices(t.shape[0], k=1)
        differs = (t[iu] != e[iu]) | (t.T[iu] != e.T[iu])
        shd = int(np.sum(differs))
    tp = int(np.sum(t & e))
    fp = int(np.sum(e & ~t))
    fn = int(np.sum(t & ~e))
    tpr_undefined = tp + fn == 0
    fdr_undefined = tp + fp == 0
    tpr = 1.0 if tpr_undefined else tp / (tp + fn)
    fdr = 0.0 if fdr_undefined else fp / (tp + fp)
    return GraphMetrics(shd, tpr, fdr, tp, fp, fn, tpr_undefined, fdr_undefined)


@dataclass
class MetricsReport:
    sim: float
    cpi: float
    rr: float
    shd_w: int
    shd_a: int
    tpr_w: float
    tpr_a: float
    fdr_w: float
    fdr_a: float
    tpr_w_undefined: bool = False
    tpr_a_undefined: bool = False
    fdr_w_undefined: bool = False
    fdr_a_undefined: bool = False

    def to_dict(self):
        return asdict(self)


def match_components(v_true, v_est):
    """Permutation ``perm`` so that estimated column ``perm[i]`` pairs with true column ``i``.

    Maximizes the summed absolute cosine similarity (Hungarian assignment),
    so a sign-flipped column still pairs with its counterpart.
    """
    cos = np.abs(cosine_matrix(v_true, v_est))
    rows, cols = linear_sum_assignment(-cos)
    return cols[np.argsort(rows)]


class AlignedEstimate(NamedTuple):
    V: np.ndarray
    U: list
    T: list
    W: np.ndarray | None
    A: list


def align_to_truth(truth_factors, factors, graph=None):
    """Express an estimate in the column order and scale gauge of the truth.

    A PARAFAC2 fit is only determined up to a column permutation and, per
    component, a split of scale and sign between ``U_k``, ``S_k`` and ``V``.
    Columns are matched on ``V`` by :func:`match_components`. Signs are fixed
    without the truth (each column of ``V`` and of ``H`` gets a non-negative
    sum); magnitudes are then set so that every ``V`` column and every ``H``
    column has the norm of its true counterpart. Trajectories ``U_k S_k``
    absorb the inverse ``V`` scaling, which keeps ``U_k S_k V^T`` unchanged,
    and the graph is conjugated accordingly (``W_ij -> W_ij c_j / c_i`` for
    trajectory column scales ``c``).
    """
    perm = match_components(truth_factors.V, factors.V)
    v = factors.V[:, perm]
    sign_v = np.where(v.sum(axis=0) < 0, -1.0, 1.0)
    scale_v = sign_v * np.linalg.norm(truth_factors.V, axis=0) / np.linalg.norm(v, axis=0)
    v_al = v * scale_v
    traj_scale = 1.0 / scale_v
    t_al = [(u * s)[:, perm] * traj_scale for u, s in zip(factors.U, factors.S)]

    h = factors.H[:, perm] if factors.H is not None else None
    if h is not None:
        sign_h = np.where(h.sum(axis=0) < 0, -1.0, 1.0)
        scale_h = sign_h * np.linalg.norm(truth_factors.H, axis=0) / np.linalg.norm(h, axis=0)
    else:
        scale_h = np.ones(len(perm))
    u_al = [u[:, perm] * scale_h for u in factors.U]

    w_al, a_al = None, []
    if graph is not None:
        conj = traj_scale[None, :] / traj_scale[:, None]
        w_al = graph.W[np.ix_(perm, perm)] * conj
        a_al = [a[np.ix_(perm, perm)] * conj for a in graph.A]
    return AlignedEstimate(v_al, u_al, t_al, w_al, a_al)


def evaluate(truth, factors, graph=None, tau_w=0.3, tau_a=0.1):
    """All metrics of an estimate against a :class:`~carted.synthetic.GroundTruth`.

    Factors and graph are first aligned with :func:`align_to_truth`; graph
    entries are then binarized with ``|w| > tau_w`` and ``|a| > tau_a``.
    """
    al = align_to_truth(truth.factors, factors, graph)
    report = dict(
        sim=sim(truth.factors.V, al.V),
        cpi=cpi(al.U, truth.factors.H),
        rr=rr(al.T, truth.trajectories),
    )
    if graph is None:
        w_est = np.zeros_like(truth.graph.W)
        a_est = [np.zeros_like(a) for a in truth.graph.A]
    else:
        w_est, a_est = al.W, al.A
    gw = graph_metrics(truth.graph.W, np.abs(w_est) > tau_w)
    if truth.graph.A:
        ga = graph_metrics(np.vstack(truth.graph.A), np.abs(np.vstack(a_est)) > tau_a, temporal=True)
    else:
        ga = GraphMetrics(0, 1.0, 0.0, 0, 0, 0, True, True)
    return MetricsReport(
        sim=report["sim"], cpi=report["cpi"], rr=report["rr"],
        shd_w=gw.shd, shd_a=ga.shd, tpr_w=gw.tpr, tpr_a=ga.tpr, fdr_w=gw.fdr, fdr_a=ga.fdr,
        tpr_w_undefined=gw.tpr_undefined, tpr_a_undefined=ga.tpr_undefined,
        fdr_w_undefined=gw.fdr_undefined, fdr_a_undefined=ga.fdr_undefined,
    )
