"""Temporal causal structure learning over latent trajectories.

Every slice keeps local copies ``W̃_k`` and ``Ã_k`` of the shared graph. The
local problems are ridge regressions of ``T_k`` on ``[T_k, M_1 T_k, ..., M_P T_k]``;
the global ``W`` solves a proximal-gradient problem with the trace-exponential
acyclicity penalty, the global ``A`` is a soft-thresholded average, and the
penalties grow geometrically until ``h(W)`` vanishes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DegenerateWarning, DimensionError, DivergenceError
from .linalg import h_acyclicity, h_and_grad, shift_rows, soft_threshold, solve_spd


@dataclass
class CausalGraph:
    """Contemporaneous weights ``W`` and lag matrices ``A[p - 1] = A^(p)``."""

    W: np.ndarray
    A: list = field(default_factory=list)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.A = [np.asarray(a, dtype=float) for a in self.A]
        if self.W.ndim != 2 or self.W.shape[0] != self.W.shape[1]:
            raise DimensionError(f"W must be square, got shape {self.W.shape}")
        for a in self.A:
            if a.shape != self.W.shape:
                raise DimensionError(f"lag matrix shape {a.shape} differs from W {self.W.shape}")

    @property
    def P(self):
        return len(self.A)

    @property
    def R(self):
        return self.W.shape[0]

    def stacked_A(self):
        """Lag matrices stacked vertically, shape ``(P * R, R)``."""
        if not self.A:
            return np.zeros((0, self.R))
        return np.vstack(self.A)

    @classmethod
    def from_stacked(cls, w, a_stacked):
        w = np.asarray(w, dtype=float)
        r = w.shape[0]
        a_stacked = np.asarray(a_stacked, dtype=float).reshape(-1, r)
        return cls(w, [a_stacked[i * r:(i + 1) * r] for i in range(a_stacked.shape[0] // r)])

    @classmethod
    def empty(cls, r, p, w_init="identity"):
        """Starting graph: ``W = I`` (default) or ``W = 0``, and ``A = 0``."""
        if w_init not in ("identity", "zero"):
            raise ValueError(f"unknown W initialization {w_init!r}")
        w = np.eye(r) if w_init == "identity" else np.zeros((r, r))
        return cls(w, [np.zeros((r, r)) for _ in range(p)])

    def copy(self):
        return CausalGraph(self.W.copy(), [a.copy() for a in self.A])


@dataclass
class CausalAdmmState:
    """Local copies, scaled duals and penalty schedule of the causal block.

    Per-slice quantities are stacked along axis 0, e.g. ``beta`` has shape
    ``(K, R, R)`` and ``gamma`` ``(K, P * R, R)``.
    """

    W_tilde: np.ndarray
    A_tilde: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    alpha: float = 0.0
    rho1: float = 1.0
    rho2: float = 1.0
    phi1: float = 1.6
    phi2: float = 1.6
    rho_cap: float = 1e16
    capped: bool = False

    def __post_init__(self):
        for name in ("W_tilde", "A_tilde", "beta", "gamma"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.rho1 <= 0 or self.rho2 <= 0:
            raise ValueError("penalties must be positive")
        if self.phi1 < 1 or self.phi2 < 1:
            raise ValueError("growth factors must be at least 1")

    @classmethod
    def initialize(cls, graph, k_slices, rho1=1.0, rho2=1.0, phi1=1.6, phi2=1.6, rho_cap=1e16):
        a = graph.stacked_A()
        return cls(
            W_tilde=np.repeat(graph.W[None], k_slices, axis=0),
            A_tilde=np.repeat(a[None], k_slices, axis=0),
            beta=np.zeros((k_slices,) + graph.W.shape),
            gamma=np.zeros((k_slices,) + a.shape),
            rho1=rho1, rho2=rho2, phi1=phi1, phi2=phi2, rho_cap=rho_cap,
        )


def lag_design(t, p):
    """``[T, M_1 T, ..., M_P T]``."""
    return np.hstack([t] + [shift_rows(t, i) for i in range(1, p + 1)])


def local_update(t_k, w_global, a_global, beta_k, gamma_k, rho2, p, free_diagonal=False):
    """Per-slice ridge regression for ``(W̃_k, Ã_k)``.

    Minimizes ``||T - T W̃ - sum_p M_p T Ã_p||^2 / (2 I_k) + rho2/2 ||[W̃; Ã] - [W - β; A - γ]||^2``.

    Parameters
    ----------
    t_k : ndarray of shape (I_k, R)
    w_global : ndarray of shape (R, R)
    a_global : ndarray of shape (P * R, R)
        Stacked lag matrices.
    beta_k, gamma_k : ndarray
        Scaled duals, shaped like ``w_global`` and ``a_global``.
    rho2 : float
    p : int
        Lag order.
    free_diagonal : bool, default False
        When False the diagonal of ``W̃_k`` is held at zero, so no series
        regresses on itself; when True it is a free regression coefficient.

    Returns
    -------
    w_tilde : ndarray of shape (R, R)
    a_tilde : ndarray of shape (P * R, R)
    """
    t_k = np.asarray(t_k, dtype=float)
    i_k, r = t_k.shape
    if i_k <= p:
        raise ValueError(f"slice with {i_k} rows is too short for lag order {p}")
    z = lag_design(t_k, p)
    gram = z.T @ z / i_k
    cross = z.T @ t_k / i_k
    prior = np.vstack([np.asarray(w_global) - beta_k,
                       np.asarray(a_global).reshape(-1, r) - np.asarray(gamma_k).reshape(-1, r)])
    d = gram.shape[0]
    lhs = gram + rho2 * np.eye(d)
    rhs = cross + rho2 * prior
    if free_diagonal:
        theta = solve_spd(lhs, rhs)
    else:
        theta = np.zeros((d, r))
        for j in range(r):
            keep = np.arange(d) != j
            theta[keep, j] = solve_spd(lhs[np.ix_(keep, keep)], rhs[keep, j])
    return theta[:r], theta[r:]


class _LocalSystems:
    """Local regressions of all slices, batched over slices.

    The trajectories are fixed for a whole causal block, so each Gram matrix
    (or, with a held-out diagonal, each column's sub-Gram) is diagonalized
    once; a ridge solve for any ``rho2`` is then two matrix products.
    """

    def __init__(self, trajectories, p, free_diagonal):
        t_list = list(trajectories)
        self.r = t_list[0].shape[1]
        self.d = (p + 1) * self.r
        self.free_diagonal = free_diagonal
        grams, crosses = [], []
        for t in t_list:
            z = lag_design(t, p)
            grams.append(z.T @ z / t.shape[0])
            crosses.append(z.T @ t / t.shape[0])
        gram = np.stack(grams)
        self.cross = np.stack(crosses)
        if free_diagonal:
            self.eig = [np.linalg.eigh(gram)]
        else:
            self.keep = [np.flatnonzero(np.arange(self.d) != j) for j in range(self.r)]
            self.eig = [np.linalg.eigh(gram[:, k][:, :, k]) for k in self.keep]

    def solve(self, prior, rho2):
        rhs = self.cross + rho2 * prior
        if self.free_diagonal:
            lam, vec = self.eig[0]
            coef = np.swapaxes(vec, -1, -2) @ rhs / (lam + rho2)[..., None]
            return vec @ coef
        theta = np.zeros_like(prior)
        for j, keep, (lam, vec) in zip(range(self.r), self.keep, self.eig):
            coef = np.einsum("kab,ka->kb", vec, rhs[:, keep, j]) / (lam + rho2)
            theta[:, keep, j] = np.einsum("kab,kb->ka", vec, coef)
        return theta


def global_A_update(a_tilde_list, gamma_list, rho2, lambda_a):
    """``soft_threshold(mean_k(Ã_k + γ_k), lambda_a / (K rho2))``."""
    k = len(a_tilde_list)
    mean = np.mean(np.asarray(a_tilde_list) + np.asarray(gamma_list), axis=0)
    return soft_threshold(mean, lambda_a / (k * rho2))


def global_w_objective(w, w_tilde_list, beta_list, alpha, rho1, rho2, lambda_w):
    """``sum_k rho2/2 ||W̃_k - W + β_k||^2 + rho1/2 (h(W) + α)^2 + lambda_w ||W||_1``."""
    value = sum(0.5 * rho2 * np.sum((wt - w + b) ** 2) for wt, b in zip(w_tilde_list, beta_list))
    value += 0.5 * rho1 * (h_acyclicity(w) + alpha) ** 2
    return float(value + lambda_w * np.abs(w).sum())


def global_W_update(w_tilde_list, beta_list, alpha, rho1, rho2, lambda_w, w_init,
                    zero_diagonal=True, max_iter=1000, tol=1e-10, armijo=1e-4, max_halvings=50):
    """Proximal-gradient solve of the global ``W`` problem.

    Minimizes :func:`global_w_objective`. The step size backtracks by halving
    from 1.0 until the Armijo condition
    ``F(W+) <= F(W) - armijo / t * ||W+ - W||^2`` holds; the accepted step
    (doubled, capped at 1.0) seeds the next iteration. With
    ``zero_diagonal`` the diagonal is held at zero (the proximal step then
    projects onto zero-diagonal matrices), and ``w_init`` is projected
    before the first step. The returned objective is never above that of
    the (projected) starting point.
    """
    k = len(w_tilde_list)
    mean = np.mean(np.asarray(w_tilde_list) + np.asarray(beta_list), axis=0)
    # the objective is divided by its penalty scale so that a unit step stays
    # meaningful while rho1 and rho2 grow; the minimizer is unchanged
    scale = k * rho2 + rho1
    curv = k * rho2 / scale
    c_h = rho1 / scale
    lam = lambda_w / scale
    offdiag = 1.0 - np.eye(mean.shape[0]) if zero_diagonal else 1.0

    def smooth(w):
        # trial steps can be wild; let them evaluate to inf and get rejected
        with np.errstate(all="ignore"):
            h, gh = h_and_grad(w)
            hh = np.float64(h) + alpha
            val = 0.5 * curv * np.sum((w - mean) ** 2) + 0.5 * c_h * hh * hh
            return val, curv * (w - mean) + c_h * hh * gh

    def prox(z, t):
        return soft_threshold(z, t * lam) * offdiag

    w = np.asarray(w_init, dtype=float) * offdiag
    f_smooth, grad = smooth(w)
    f_total = f_smooth + lam * np.abs(w).sum()
    step = 1.0
    for _ in range(max_iter):
        for _ in range(max_halvings + 1):
            w_new = prox(w - step * grad, step)
            diff = w_new - w
            sq = float(np.sum(diff * diff))
            if sq == 0.0:
                return w
            s_new, g_new = smooth(w_new)
            f_new = s_new + lam * np.abs(w_new).sum()
            if np.isfinite(f_new) and f_new <= f_total - armijo / step * sq:
                break
            step *= 0.5
        else:
            warnings.warn("line search failed in the global W update; returning the best iterate",
                          DegenerateWarning, stacklevel=2)
            return w
        w, f_smooth, grad, f_total = w_new, s_new, g_new, f_new
        if np.sqrt(sq) <= tol * max(1.0, float(np.linalg.norm(w))):
            break
        step = min(1.0, 2.0 * step)
    return w


def causal_dual_update(state, w, a, w_tilde, a_tilde):
    """Dual ascent and geometric penalty growth (capped at ``state.rho_cap``)."""
    state.beta = state.beta + (np.asarray(w_tilde) - w)
    state.gamma = state.gamma + (np.asarray(a_tilde) - a)
    state.alpha += h_acyclicity(w)
    rho1, rho2 = state.rho1 * state.phi1, state.rho2 * state.phi2
    if rho1 > state.rho_cap or rho2 > state.rho_cap:
        state.capped = True
    state.rho1 = min(rho1, state.rho_cap)
    state.rho2 = min(rho2, state.rho_cap)
    return state


@dataclass
class CausalReport:
    iterations: int = 0
    converged: bool = False
    h: list = field(default_factory=list)
    consensus_gap: list = field(default_factory=list)
    dropped_slices: list = field(default_factory=list)
    penalty_capped: bool = False


class CausalBlockResult(NamedTuple):
    graph: CausalGraph
    state: CausalAdmmState
    report: CausalReport


def run_causal_block(trajectories, graph, state=None, lambda_w=0.5, lambda_a=0.5, max_outer=1000,
                     h_tol=1e-8, free_diagonal=False, zero_diagonal=True, rho1=1.0, rho2=1.0,
                     phi1=1.6, phi2=1.6, rho_cap=1e16):
    """Consensus ADMM for the shared temporal graph.

    Parameters
    ----------
    trajectories : TrajectorySet or list of ndarray
        Slices shorter than ``P + 1`` rows are skipped with a warning.
    graph : CausalGraph
        Starting graph; its lag order fixes ``P``.
    state : CausalAdmmState, optional
        Fresh state (penalties ``rho1``, ``rho2``, growth ``phi1``, ``phi2``)
        when omitted.
    lambda_w, lambda_a : float
    max_outer : int
    h_tol : float
        Stop once ``h(W) <= h_tol``.
    free_diagonal : bool
        Let the local copies regress each series on itself.
    zero_diagonal : bool
        Hold the diagonal of the global ``W`` at zero.

    Returns
    -------
    CausalBlockResult
    """
    p = graph.P
    t_all = [np.asarray(t, dtype=float) for t in trajectories]
    keep = [k for k, t in enumerate(t_all) if t.shape[0] > p]
    report = CausalReport(dropped_slices=[k for k in range(len(t_all)) if k not in keep])
    if report.dropped_slices:
        warnings.warn(f"{len(report.dropped_slices)} slices shorter than lag order + 1 were skipped",
                      DegenerateWarning, stacklevel=2)
    if not keep:
        raise ValueError("no slice is long enough for the causal block")
    t_use = [t_all[k] for k in keep]
    k_slices = len(t_use)
    if state is None:
        state = CausalAdmmState.initialize(graph, k_slices, rho1, rho2, phi1, phi2, rho_cap)
    elif len(state.beta) != k_slices:
        raise ValueError(f"state has {len(state.beta)} slices, {k_slices} are usable")

    systems = _LocalSystems(t_use, p, free_diagonal)
    r = graph.R
    w = graph.W.copy()
    a = graph.stacked_A()
    for it in range(1, max_outer + 1):
        prior = np.concatenate([w - state.beta, a - state.gamma], axis=1)
        theta = systems.solve(prior, state.rho2)
        w_tilde, a_tilde = theta[:, :r], theta[:, r:]
        w = global_W_update(w_tilde, state.beta, state.alpha, state.rho1, state.rho2, lambda_w, w,
                            zero_diagonal=zero_diagonal)
        a = global_A_update(a_tilde, state.gamma, state.rho2, lambda_a)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(a))):
            raise DivergenceError("non-finite graph in the causal block", report)
        state.W_tilde, state.A_tilde = w_tilde, a_tilde
        causal_dual_update(state, w, a, w_tilde, a_tilde)
        h = h_acyclicity(w)
        gap = np.sqrt(np.sum((w_tilde - w) ** 2) / k_slices)
        report.h.append(h)
        report.consensus_gap.append(float(gap))
        report.iterations = it
        if h <= h_tol:
            report.converged = True
            break
    report.penalty_capped = state.capped
    return CausalBlockResult(CausalGraph.from_stacked(w, a), state, report)
