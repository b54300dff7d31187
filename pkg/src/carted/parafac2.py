"""Causally regularized PARAFAC2 updates.

The slice factors ``U_k`` are split into a primal copy, an auxiliary ``Ũ_k``
carrying the causal regularizer and an auxiliary ``Û_k = Q_k H`` carrying the
PARAFAC2 constraint. ``S_k`` is split the same way with one auxiliary ``S̃_k``.
All duals are scaled. Inside the blocks the fit term has weight one and each
consensus term weight ``rho / 2``; these weights are what the closed-form
updates below solve exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .errors import DegenerateWarning, DivergenceError, MonotonicityWarning, NumericalError
from .linalg import khatri_rao, right_solve_spd, shift_rows, solve_spd
from .tensor import svar_residual

RHO_FLOOR = 1e-6
DENSE_LIMIT = 2000
H_JITTER = 1e-10


@dataclass
class TensorAdmmState:
    """Auxiliaries, scaled duals and penalties of the tensor blocks."""

    U_tilde: list
    U_hat: list
    S_tilde: list
    mu_U_tilde: list
    mu_U_hat: list
    mu_S: list
    rho_u: np.ndarray
    rho_s: np.ndarray

    @classmethod
    def initialize(cls, factors):
        k = len(factors.U)
        return cls(
            U_tilde=[u.copy() for u in factors.U],
            U_hat=[u.copy() for u in factors.U],
            S_tilde=[s.copy() for s in factors.S],
            mu_U_tilde=[np.zeros_like(u) for u in factors.U],
            mu_U_hat=[np.zeros_like(u) for u in factors.U],
            mu_S=[np.zeros_like(s) for s in factors.S],
            rho_u=np.ones(k),
            rho_s=np.ones(k),
        )

    def rescale_u_duals(self, new_rho):
        """Keep the unscaled multipliers fixed while the penalties change."""
        new_rho = np.asarray(new_rho, dtype=float)
        ratio = self.rho_u / new_rho
        for k in range(len(self.mu_U_tilde)):
            self.mu_U_tilde[k] = self.mu_U_tilde[k] * ratio[k]
            self.mu_U_hat[k] = self.mu_U_hat[k] * ratio[k]
        self.rho_u = new_rho.copy()

    def rescale_s_duals(self, new_rho):
        new_rho = np.asarray(new_rho, dtype=float)
        ratio = self.rho_s / new_rho
        for k in range(len(self.mu_S)):
            self.mu_S[k] = self.mu_S[k] * ratio[k]
        self.rho_s = new_rho.copy()


@dataclass
class BlockReport:
    """Diagnostics of one inner ADMM run."""

    iterations: int = 0
    converged: bool = False
    lagrangian: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    gaps: list = field(default_factory=list)
    monotonicity_violations: int = 0


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DivergenceError(f"non-finite values in {name}")


# ---------------------------------------------------------------------------
# U block


def update_U(x_k, s_k, v, u_tilde, u_hat, mu_tilde, mu_hat, rho):
    """Closed-form primal update of ``U_k``.

    Minimizes ``||X_k - U S_k V^T||^2 + rho/2 ||U - Ũ + μ̃||^2 + rho/2 ||U - Û + μ̂||^2``,
    i.e. ``U (S V^T V S + rho I) = X V S + rho/2 (Ũ + Û - μ̃ - μ̂)``.
    """
    s_k = np.asarray(s_k, dtype=float)
    gram = s_k[:, None] * (v.T @ v) * s_k[None, :] + rho * np.eye(len(s_k))
    rhs = (x_k @ v) * s_k + 0.5 * rho * (u_tilde + u_hat - mu_tilde - mu_hat)
    return right_solve_spd(rhs, gram)


def phi_apply(u, s_k, w, a_lags):
    """Causal operator on one slice: ``U S (I - W) - sum_p M_p U S A_p``.

    This is the matrix form of ``Phi vec(U)``; ``u`` may carry leading batch
    dimensions.
    """
    return svar_residual(u * s_k, w, a_lags)


def phi_adjoint(y, s_k, w, a_lags):
    """Adjoint of :func:`phi_apply`."""
    out = y @ (np.eye(w.shape[0]) - w).T
    n = y.shape[-2]
    for p, a in enumerate(a_lags, start=1):
        up = np.zeros_like(y)
        if p < n:
            up[..., : n - p, :] = y[..., p:, :]
        out = out - up @ a.T
    return out * s_k


def _vec(m):
    return m.T.reshape(-1)


def _unvec(x, rows, cols):
    return x.reshape(cols, rows).T


class UTildeSystem:
    """Factorized system ``(Phi^T Phi / I_k + rho I) vec(Ũ) = rho vec(U + μ̃)``.

    The matrix only depends on ``S_k``, the graph and ``rho``, so it is built
    once per block and reused by every sweep. ``Phi`` is assembled from the
    matrix-form operator rather than Kronecker products; past
    ``DENSE_LIMIT`` unknowns the system is solved matrix-free by conjugate
    gradients.
    """

    def __init__(self, s_k, w, a_lags, rho, i_k):
        self.s = np.asarray(s_k, dtype=float)
        self.w = np.asarray(w, dtype=float)
        self.a_lags = [np.asarray(a, dtype=float) for a in a_lags]
        self.rho = float(rho)
        self.i_k = int(i_k)
        r = len(self.s)
        n = self.i_k * r
        self._factor = None
        self._op = None
        if n <= DENSE_LIMIT:
            basis = np.eye(n).reshape(n, r, self.i_k).transpose(0, 2, 1)
            cols = phi_apply(basis, self.s, self.w, self.a_lags)
            phi = cols.transpose(0, 2, 1).reshape(n, n).T
            gram = phi.T @ phi / self.i_k + self.rho * np.eye(n)
            self._factor = scipy.linalg.cho_factor(gram, check_finite=False)
        else:
            def matvec(x):
                u = _unvec(x, self.i_k, r)
                y = phi_apply(u, self.s, self.w, self.a_lags)
                return _vec(phi_adjoint(y, self.s, self.w, self.a_lags)) / self.i_k + self.rho * x

            self._op = scipy.sparse.linalg.LinearOperator((n, n), matvec=matvec)

    def solve(self, u_plus_mu):
        u_plus_mu = np.asarray(u_plus_mu, dtype=float)
        rhs = self.rho * _vec(u_plus_mu)
        if self._factor is not None:
            x = scipy.linalg.cho_solve(self._factor, rhs, check_finite=False)
        else:
            x, info = scipy.sparse.linalg.cg(self._op, rhs, x0=_vec(u_plus_mu), rtol=1e-12,
                                             maxiter=10 * len(rhs))
            if info != 0:
                raise NumericalError(f"conjugate gradients did not converge (info={info})")
        return _unvec(x, self.i_k, len(self.s))


def update_U_tilde(s_k, w, a_lags, u_plus_mu, rho, i_k):
    """Minimize ``||Phi vec(Ũ)||^2 / (2 I_k) + rho/2 ||Ũ - (U + μ̃)||^2``."""
    return UTildeSystem(s_k, w, a_lags, rho, i_k).solve(u_plus_mu)


def procrustes_q(b):
    """Orthonormal ``Q`` maximizing ``tr(Q^T b)``: ``Q = U_b V_b^T``."""
    b = np.asarray(b, dtype=float)
    if not np.any(b):
        warnings.warn("Procrustes input is zero; returning a fixed orthonormal basis",
                      DegenerateWarning, stacklevel=2)
        return np.eye(b.shape[0], b.shape[1])
    u, _, vt = np.linalg.svd(b, full_matrices=False)
    return u @ vt


def update_H(q_list, u_list, mu_hat_list, rho_u):
    """Penalty-weighted mean of ``Q_k^T (U_k + μ̂_k)``."""
    if len(q_list) == 0:
        raise ValueError("update_H needs at least one slice")
    rho_u = np.asarray(rho_u, dtype=float)
    acc = sum(r * (q.T @ (u + m)) for q, u, m, r in zip(q_list, u_list, mu_hat_list, rho_u))
    return acc / rho_u.sum()


def _jitter_if_degenerate(h):
    sv = np.linalg.svd(h, compute_uv=False)
    if sv[-1] <= 1e-12 * max(sv[0], 1.0):
        return h + H_JITTER * np.eye(h.shape[0])
    return h


# ---------------------------------------------------------------------------
# S block


def update_S(x_k, u_k, v, s_tilde_minus_mu, rho):
    """Closed-form primal update of the diagonal of ``S_k``.

    Solves ``(V^T V * U^T U + rho/2 I) s = diag(U^T X V) + rho/2 (s̃ - μ)``.
    """
    gram = (v.T @ v) * (u_k.T @ u_k) + 0.5 * rho * np.eye(u_k.shape[1])
    rhs = np.einsum("ir,ij,jr->r", u_k, x_k, v) + 0.5 * rho * np.asarray(s_tilde_minus_mu)
    return solve_spd(gram, rhs)


def s_tilde_design(u_k, w, a_lags):
    """Matrix ``T_k`` with ``T_k s = vec(U diag(s) (I - W) - sum_p M_p U diag(s) A_p)``."""
    r = u_k.shape[1]
    design = khatri_rao(np.eye(r), u_k) - khatri_rao(w.T, u_k)
    for p, a in enumerate(a_lags, start=1):
        design = design - khatri_rao(a.T, shift_rows(u_k, p))
    return design


def update_S_tilde(u_k, w, a_lags, s_plus_mu, rho, i_k):
    """Minimize ``||T_k s̃||^2 / (2 I_k) + rho/2 ||s̃ - (s + μ)||^2``."""
    design = s_tilde_design(u_k, w, a_lags)
    gram = design.T @ design / i_k + rho * np.eye(u_k.shape[1])
    return solve_spd(gram, rho * np.asarray(s_plus_mu, dtype=float))


def update_V(x, u_list, s_list):
    """Least-squares ``V`` over all slices."""
    num = sum(xk.T @ (u * s) for xk, u, s in zip(x, u_list, s_list))
    gram = sum((u * s).T @ (u * s) for u, s in zip(u_list, s_list))
    try:
        factor = scipy.linalg.cho_factor(gram, check_finite=False)
    except np.linalg.LinAlgError:
        eig = np.linalg.eigvalsh(gram)
        raise NumericalError(
            f"V update: Gram of U_k S_k is singular (eigenvalues {eig.min():.3g}..{eig.max():.3g}); "
            "the factors are rank deficient"
        ) from None
    return scipy.linalg.cho_solve(factor, num.T, check_finite=False).T


def penalty_rho(s_k, v, u_k):
    """Penalty rule ``rho_u = tr(S V^T V S) / R`` and ``rho_s = tr(V^T V * U^T U) / R``.

    Values at or below ``RHO_FLOOR`` are clamped to the floor with a warning.
    """
    s_k = np.asarray(s_k, dtype=float)
    r = len(s_k)
    vtv = np.einsum("jr,jr->r", v, v)
    rho_u = float(np.sum(s_k * s_k * vtv)) / r
    rho_s = float(np.sum(vtv * np.einsum("ir,ir->r", u_k, u_k))) / r
    if rho_u <= RHO_FLOOR or rho_s <= RHO_FLOOR:
        warnings.warn("degenerate factors: penalty clamped to the floor", DegenerateWarning,
                      stacklevel=2)
    return max(rho_u, RHO_FLOOR), max(rho_s, RHO_FLOOR)


def update_u_duals(state, u_list):
    for k, u in enumerate(u_list):
        state.mu_U_tilde[k] = state.mu_U_tilde[k] + (u - state.U_tilde[k])
        state.mu_U_hat[k] = state.mu_U_hat[k] + (u - state.U_hat[k])
    return state


def update_s_duals(state, s_list):
    for k, s in enumerate(s_list):
        state.mu_S[k] = state.mu_S[k] + (s - state.S_tilde[k])
    return state


def dual_updates(state, u_list=None, s_list=None):
    """Scaled dual ascent ``μ += primal - auxiliary`` for the given primals."""
    if u_list is not None:
        update_u_duals(state, u_list)
    if s_list is not None:
        update_s_duals(state, s_list)
    return state


# ---------------------------------------------------------------------------
# Inner ADMM loops


def _causal_terms(graph):
    """``(W, A)`` of the regularizer, or ``None`` when it is disabled."""
    if graph is None:
        return None
    return np.asarray(graph.W, dtype=float), [np.asarray(a, dtype=float) for a in graph.A]


def _reg_value(t, terms):
    if terms is None:
        return 0.0
    r = svar_residual(t, *terms)
    return float(np.sum(r * r)) / (2.0 * t.shape[0])


def _sq(a):
    return float(np.sum(a * a))


def _rel_change(new, old):
    return abs(new - old) / max(abs(old), 1e-300)


def u_block_lagrangian(x, factors, graph, state):
    """Scaled augmented Lagrangian of the U block."""
    terms = _causal_terms(graph)
    total = 0.0
    for k, xk in enumerate(x):
        u, s, rho = factors.U[k], factors.S[k], state.rho_u[k]
        ut, uh, mt, mh = state.U_tilde[k], state.U_hat[k], state.mu_U_tilde[k], state.mu_U_hat[k]
        total += _sq(xk - (u * s) @ factors.V.T) + _reg_value(ut * s, terms)
        total += 0.5 * rho * (_sq(u - ut + mt) - _sq(mt) + _sq(u - uh + mh) - _sq(mh))
    return total


def s_block_lagrangian(x, factors, graph, state):
    """Scaled augmented Lagrangian of the S block."""
    terms = _causal_terms(graph)
    total = 0.0
    for k, xk in enumerate(x):
        u, s, rho = factors.U[k], factors.S[k], state.rho_s[k]
        st, ms = state.S_tilde[k], state.mu_S[k]
        total += _sq(xk - (u * s) @ factors.V.T) + _reg_value(u * st, terms)
        total += 0.5 * rho * (_sq(s - st + ms) - _sq(ms))
    return total


def _block_loss(x, factors, terms):
    total = 0.0
    for xk, u, s in zip(x, factors.U, factors.S):
        total += _sq(xk - (u * s) @ factors.V.T) + _reg_value(u * s, terms)
    return total


def _gap(a_list, b_list, ref_list):
    num = sum(_sq(a - b) for a, b in zip(a_list, b_list))
    den = sum(_sq(a) for a in ref_list)
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))


def _record(report, lagrangian, slack_rel=1e-12):
    if report.lagrangian:
        prev = report.lagrangian[-1]
        if lagrangian > prev + max(1e-9, slack_rel * abs(prev)):
            report.monotonicity_violations += 1
            if report.monotonicity_violations == 1:
                warnings.warn(
                    "augmented Lagrangian increased inside a block; the penalty may be "
                    "below the level that guarantees descent", MonotonicityWarning, stacklevel=3)
    report.lagrangian.append(lagrangian)


class _Groups:
    """Slices bucketed by row count, so per-slice updates run as stacked array ops."""

    def __init__(self, visit_counts):
        counts = np.asarray(visit_counts)
        self.index = [np.flatnonzero(counts == i) for i in np.unique(counts)]

    def stack(self, items):
        return [np.stack([items[k] for k in idx]) for idx in self.index]

    def take(self, values):
        values = np.asarray(values, dtype=float)
        return [values[idx] for idx in self.index]

    def scatter(self, stacks, out):
        for idx, st in zip(self.index, stacks):
            for j, k in enumerate(idx):
                out[k] = st[j].copy()
        return out


def _vec_batch(u):
    return u.transpose(0, 2, 1).reshape(u.shape[0], -1)


def _unvec_batch(x, rows, cols):
    return x.reshape(x.shape[0], cols, rows).transpose(0, 2, 1)


def _spd_inverse(gram):
    """Inverse of a stack of SPD matrices via Cholesky."""
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        raise NumericalError("block system is not positive definite") from None
    eye = np.broadcast_to(np.eye(gram.shape[-1]), gram.shape)
    linv = np.linalg.solve(chol, eye)
    return np.swapaxes(linv, -1, -2) @ linv


def _tilde_inverse(s, terms, rho, i_k):
    """Stacked inverses of ``Phi^T Phi / I_k + rho I`` for slices of equal length."""
    b, r = s.shape
    n = i_k * r
    basis = np.eye(n).reshape(n, r, i_k).transpose(0, 2, 1)
    cols = svar_residual(basis[None] * s[:, None, None, :], *terms)
    phi = np.swapaxes(cols.transpose(0, 1, 3, 2).reshape(b, n, n), -1, -2)
    gram = np.swapaxes(phi, -1, -2) @ phi / i_k + rho[:, :, None] * np.eye(n)
    return _spd_inverse(gram)


def _design_batch(u, terms):
    """Stacked :func:`s_tilde_design` matrices for slices of equal length."""
    r = u.shape[-1]
    cols = svar_residual(u[:, None] * np.eye(r)[None, :, None, :], *terms)
    return np.swapaxes(cols.transpose(0, 1, 3, 2).reshape(u.shape[0], r, -1), -1, -2)


def _sq_batch(a):
    return np.einsum("...ij,...ij->...", a, a)


def _reg_batch(t, terms):
    if terms is None:
        return np.zeros(t.shape[0])
    res = svar_residual(t, *terms)
    return _sq_batch(res) / (2.0 * t.shape[-2])


def run_u_block(x, factors, graph, state, tol=1e-4, loss_tol=1e-6, max_inner=50):
    """Inner ADMM for ``{U_k}``: ``Q_k, H`` (giving ``Û_k``), then ``Ũ_k``, then ``U_k``, then duals.

    Per-slice updates are those of :func:`procrustes_q`, :func:`update_H`,
    :func:`update_U_tilde` and :func:`update_U`, evaluated on slices stacked
    by length.

    Parameters
    ----------
    x : IrregularTensor
    factors : Parafac2Factors
        Updated in place (``U``, ``Q``, ``H``).
    graph : CausalGraph or None
        Graph of the causal regularizer; ``None`` disables it.
    state : TensorAdmmState
        Updated in place; ``state.rho_u`` must already hold the penalties.
    tol : float
        Threshold on the relative feasibility gaps.
    loss_tol : float
        Threshold on the relative change of the block loss.
    max_inner : int

    Returns
    -------
    BlockReport
    """
    terms = _causal_terms(graph)
    v = factors.V
    vtv = v.T @ v
    r = v.shape[1]
    if factors.H is None:
        factors.H = np.eye(r)
    if not factors.Q:
        factors.Q = [np.zeros_like(u) for u in factors.U]

    g = _Groups(x.visit_counts)
    xs = g.stack(x.slices)
    u = g.stack(factors.U)
    s = g.stack(factors.S)
    q = g.stack(factors.Q)
    ut, uh = g.stack(state.U_tilde), g.stack(state.U_hat)
    mt, mh = g.stack(state.mu_U_tilde), g.stack(state.mu_U_hat)
    rho = [rk[:, None, None] for rk in g.take(state.rho_u)]
    rho_sum = float(np.sum(state.rho_u))
    eye = np.eye(r)
    u_inv = [_spd_inverse(sk[:, :, None] * vtv * sk[:, None, :] + rk * eye) for sk, rk in zip(s, rho)]
    xvs = [(xk @ v) * sk[:, None, :] for xk, sk in zip(xs, s)]
    # per group: stacked dense inverses, or matrix-free systems past DENSE_LIMIT
    t_inv = None
    if terms is not None:
        t_inv = []
        for idx, sk, xk, rk in zip(g.index, s, xs, rho):
            i_k = xk.shape[1]
            if i_k * r <= DENSE_LIMIT:
                t_inv.append(_tilde_inverse(sk, terms, rk[:, :, 0], i_k))
            else:
                t_inv.append([UTildeSystem(sk[j], terms[0], terms[1], rk[j, 0, 0], i_k)
                              for j in range(len(idx))])

    def fit_terms():
        return sum(float(np.sum(_sq_batch(xk - (uk * sk[:, None, :]) @ v.T)))
                   for xk, uk, sk in zip(xs, u, s))

    def loss_value():
        return fit_terms() + sum(float(np.sum(_reg_batch(uk * sk[:, None, :], terms)))
                                 for uk, sk in zip(u, s))

    def lagrangian():
        total = fit_terms()
        for i in range(len(u)):
            total += float(np.sum(_reg_batch(ut[i] * s[i][:, None, :], terms)))
            pen = (_sq_batch(u[i] - ut[i] + mt[i]) - _sq_batch(mt[i])
                   + _sq_batch(u[i] - uh[i] + mh[i]) - _sq_batch(mh[i]))
            total += float(np.sum(0.5 * rho[i][:, 0, 0] * pen))
        return total

    report = BlockReport()
    loss = loss_value()
    report.loss.append(loss)
    for it in range(1, max_inner + 1):
        h = _jitter_if_degenerate(factors.H)
        acc = np.zeros((r, r))
        for i in range(len(u)):
            left, _, right = np.linalg.svd((u[i] + mh[i]) @ h.T, full_matrices=False)
            q[i] = left @ right
            acc += np.einsum("b,bir,bic->rc", rho[i][:, 0, 0], q[i], u[i] + mh[i])
        factors.H = acc / rho_sum
        for i in range(len(u)):
            uh[i] = q[i] @ factors.H
            target = u[i] + mt[i]
            if t_inv is None:
                ut[i] = target
            elif isinstance(t_inv[i], list):
                ut[i] = np.stack([sys.solve(tj) for sys, tj in zip(t_inv[i], target)])
            else:
                sol = rho[i][:, :, 0] * np.einsum("bmn,bn->bm", t_inv[i], _vec_batch(target))
                ut[i] = _unvec_batch(sol, target.shape[1], r)
            rhs = xvs[i] + 0.5 * rho[i] * (ut[i] + uh[i] - mt[i] - mh[i])
            u[i] = rhs @ u_inv[i]
            mt[i] = mt[i] + (u[i] - ut[i])
            mh[i] = mh[i] + (u[i] - uh[i])
        _check_finite("U block", factors.H, *u, *ut)

        _record(report, lagrangian())
        new_loss = loss_value()
        gaps = (_gap(u, ut, u), _gap(u, uh, u))
        report.loss.append(new_loss)
        report.gaps.append(gaps)
        report.iterations = it
        if max(gaps) < tol and _rel_change(new_loss, loss) < loss_tol:
            report.converged = True
            break
        loss = new_loss

    g.scatter(u, factors.U)
    g.scatter(q, factors.Q)
    g.scatter(ut, state.U_tilde)
    g.scatter(uh, state.U_hat)
    g.scatter(mt, state.mu_U_tilde)
    g.scatter(mh, state.mu_U_hat)
    return report


def run_s_block(x, factors, graph, state, tol=1e-4, loss_tol=1e-6, max_inner=50):
    """Inner ADMM for ``{S_k}``: ``S̃_k``, then ``S_k``, then duals.

    Same conventions as :func:`run_u_block`; ``factors.S`` and ``state`` are
    updated in place and ``state.rho_s`` must hold the penalties. Per-slice
    updates are those of :func:`update_S_tilde` and :func:`update_S`.
    """
    terms = _causal_terms(graph)
    v = factors.V
    vtv = v.T @ v
    r = v.shape[1]
    eye = np.eye(r)

    g = _Groups(x.visit_counts)
    xs = g.stack(x.slices)
    u = g.stack(factors.U)
    s = g.stack(factors.S)
    st, ms = g.stack(state.S_tilde), g.stack(state.mu_S)
    rho = [rk[:, None] for rk in g.take(state.rho_s)]
    s_inv = [_spd_inverse(vtv * (np.swapaxes(uk, -1, -2) @ uk) + 0.5 * rk[:, :, None] * eye)
             for uk, rk in zip(u, rho)]
    utxv = [np.einsum("bir,bij,jr->br", uk, xk, v) for uk, xk in zip(u, xs)]
    t_inv = None
    if terms is not None:
        t_inv = []
        for uk, rk in zip(u, rho):
            d = _design_batch(uk, terms)
            t_inv.append(_spd_inverse(np.swapaxes(d, -1, -2) @ d / uk.shape[1]
                                      + rk[:, :, None] * eye))

    def fit_terms():
        return sum(float(np.sum(_sq_batch(xk - (uk * sk[:, None, :]) @ v.T)))
                   for xk, uk, sk in zip(xs, u, s))

    def loss_value():
        return fit_terms() + sum(float(np.sum(_reg_batch(uk * sk[:, None, :], terms)))
                                 for uk, sk in zip(u, s))

    def lagrangian():
        total = fit_terms()
        for i in range(len(u)):
            total += float(np.sum(_reg_batch(u[i] * st[i][:, None, :], terms)))
            pen = np.sum((s[i] - st[i] + ms[i]) ** 2 - ms[i] ** 2, axis=1)
            total += float(np.sum(0.5 * rho[i][:, 0] * pen))
        return total

    report = BlockReport()
    loss = loss_value()
    report.loss.append(loss)
    for it in range(1, max_inner + 1):
        for i in range(len(u)):
            target = s[i] + ms[i]
            if t_inv is None:
                st[i] = target
            else:
                st[i] = rho[i] * np.einsum("brc,bc->br", t_inv[i], target)
            rhs = utxv[i] + 0.5 * rho[i] * (st[i] - ms[i])
            s[i] = np.einsum("brc,bc->br", s_inv[i], rhs)
            ms[i] = ms[i] + (s[i] - st[i])
        _check_finite("S block", *s, *st)

        _record(report, lagrangian())
        new_loss = loss_value()
        gaps = (_gap(s, st, s),)
        report.loss.append(new_loss)
        report.gaps.append(gaps)
        report.iterations = it
        if gaps[0] < tol and _rel_change(new_loss, loss) < loss_tol:
            report.converged = True
            break
        loss = new_loss

    g.scatter(s, factors.S)
    g.scatter(st, state.S_tilde)
    g.scatter(ms, state.mu_S)
    return report
