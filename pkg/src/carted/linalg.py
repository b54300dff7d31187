"""Dense linear-algebra kernels shared by the tensor and causal blocks."""

from __future__ import annotations

import graphlib
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionError, NumericalError


@dataclass(frozen=True)
class ShiftOperator:
    """Lag operator that shifts the rows of an ``dim``-row matrix down by ``lag``.

    Row ``t`` of the result is row ``t - lag`` of the input; the first ``lag``
    rows are zero. The dense matrix is never formed in the solver; use
    :meth:`dense` only for checks.
    """

    lag: int
    dim: int

    def __post_init__(self):
        if self.lag < 0:
            raise ValueError(f"lag must be non-negative, got {self.lag}")
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")

    def apply(self, x):
        return shift_apply(self, x)

    def dense(self):
        return np.eye(self.dim, k=-self.lag)


def shift_rows(x, lag):
    """Shift rows (axis -2) of ``x`` down by ``lag`` with zero fill.

    Works on stacked inputs of shape ``(..., n, m)``.
    """
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    n = x.shape[-2]
    if lag == 0:
        out[...] = x
    elif lag < n:
        out[..., lag:, :] = x[..., : n - lag, :]
    return out


def shift_apply(op, x):
    """Apply a :class:`ShiftOperator` to a matrix with ``op.dim`` rows."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != op.dim:
        raise DimensionError(f"expected {op.dim} rows, got shape {x.shape}")
    return shift_rows(x, op.lag)


def khatri_rao(a, b):
    """Column-wise Kronecker product.

    Parameters
    ----------
    a : ndarray of shape (I, R)
    b : ndarray of shape (J, R)

    Returns
    -------
    ndarray of shape (I * J, R)
        Column ``r`` is ``kron(a[:, r], b[:, r])``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"column mismatch: {a.shape} vs {b.shape}")
    return scipy.linalg.khatri_rao(a, b)


def kronecker(a, b):
    return np.kron(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def _check_square(w):
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {w.shape}")
    return w


def h_acyclicity(w):
    """Trace-exponential acyclicity measure ``tr(exp(W * W)) - d``.

    Zero exactly when the weighted adjacency ``w`` has no directed cycle.
    """
    w = _check_square(w)
    return float(np.trace(scipy.linalg.expm(w * w)) - w.shape[0])


def grad_h(w):
    """Gradient of :func:`h_acyclicity`, ``exp(W * W).T * 2W``."""
    w = _check_square(w)
    return scipy.linalg.expm(w * w).T * (2.0 * w)


def h_and_grad(w):
    """Return ``(h(w), grad_h(w))`` from a single matrix exponential."""
    w = _check_square(w)
    e = scipy.linalg.expm(w * w)
    return float(np.trace(e) - w.shape[0]), e.T * (2.0 * w)


def soft_threshold(x, tau):
    """Entrywise proximal operator of ``tau * |.|``."""
    if tau < 0:
        raise ValueError(f"threshold must be non-negative, got {tau}")
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def truncated_svd(b, r):
    """Leading ``r`` singular triplets of ``b``.

    Returns
    -------
    u : ndarray of shape (m, r)
    sigma : ndarray of shape (r,)
        Non-increasing singular values.
    vt : ndarray of shape (r, n)
    """
    b = np.asarray(b, dtype=float)
    if b.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {b.shape}")
    if r < 0 or r > min(b.shape):
        raise ValueError(f"rank {r} outside [0, {min(b.shape)}]")
    u, s, vt = np.linalg.svd(b, full_matrices=False)
    return u[:, :r], s[:r], vt[:r]


def solve_spd(a, b):
    """Solve ``a x = b`` for symmetric ``a``.

    Tries a Cholesky factorization first and falls back to LU when ``a`` is
    not numerically positive definite.
    """
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(a, check_finite=False), b,
                                      check_finite=False)
    except np.linalg.LinAlgError:
        pass
    try:
        with np.errstate(divide="ignore", invalid="ignore"):
            x = scipy.linalg.solve(a, b, check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"singular system of size {np.shape(a)[0]}: {exc}") from exc
    # some scipy paths (e.g. diagonal input) return inf instead of raising
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"singular system of size {np.shape(a)[0]}")
    return x


def right_solve_spd(x, a):
    """Return ``x @ inv(a)`` for symmetric ``a`` without forming the inverse."""
    return solve_spd(a, np.asarray(x).T).T


def _sorter(adj):
    adj = np.asarray(adj, dtype=bool)
    return graphlib.TopologicalSorter(
        {j: [int(i) for i in np.flatnonzero(adj[:, j])] for j in range(adj.shape[0])})


def topological_order(adj):
    """Topological order of a directed graph given by a square boolean matrix.

    ``adj[i, j]`` is an edge ``i -> j``. Returns the list of nodes in
    topological order, or ``None`` when the graph has a cycle.
    """
    try:
        return list(_sorter(adj).static_order())
    except graphlib.CycleError:
        return None


def find_cycle(adj):
    """Return one directed cycle as a list of nodes, or ``None``."""
    try:
        _sorter(adj).prepare()
    except graphlib.CycleError as exc:
        return list(exc.args[1][:-1])
    return None
