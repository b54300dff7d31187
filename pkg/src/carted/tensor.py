"""Irregular tensors, PARAFAC2 factor sets and the joint objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .linalg import shift_rows


@dataclass(frozen=True)
class IrregularTensor:
    """A ragged stack of ``K`` matrices ``X_k`` of shape ``(I_k, J)``."""

    slices: tuple

    def __post_init__(self):
        slices = tuple(np.array(x, dtype=float, ndmin=2) for x in self.slices)
        if not slices:
            raise ValueError("an irregular tensor needs at least one slice")
        j = slices[0].shape[1]
        for k, x in enumerate(slices):
            if x.ndim != 2:
                raise DimensionError(f"slice {k} is not a matrix: shape {x.shape}")
            if x.shape[0] < 1:
                raise DimensionError(f"slice {k} has no rows")
            if x.shape[1] != j:
                raise DimensionError(f"slice {k} has {x.shape[1]} columns, expected {j}")
        object.__setattr__(self, "slices", slices)

    @property
    def K(self):
        return len(self.slices)

    @property
    def J(self):
        return self.slices[0].shape[1]

    @property
    def visit_counts(self):
        return [x.shape[0] for x in self.slices]

    def __len__(self):
        return len(self.slices)

    def __iter__(self):
        return iter(self.slices)

    def __getitem__(self, k):
        return self.slices[k]


@dataclass
class Parafac2Factors:
    """PARAFAC2 factors ``X_k ~ U_k diag(S_k) V^T`` with ``U_k = Q_k H``.

    ``S`` holds the diagonals of the ``S_k`` as length-``R`` vectors.
    """

    U: list
    S: list
    V: np.ndarray
    Q: list = field(default_factory=list)
    H: np.ndarray | None = None

    @property
    def rank(self):
        return self.V.shape[1]

    @property
    def K(self):
        return len(self.U)

    def copy(self):
        return Parafac2Factors(
            U=[u.copy() for u in self.U],
            S=[s.copy() for s in self.S],
            V=self.V.copy(),
            Q=[q.copy() for q in self.Q],
            H=None if self.H is None else self.H.copy(),
        )

    def trajectories(self):
        return TrajectorySet.from_factors(self)


@dataclass
class TrajectorySet:
    """Per-slice latent trajectories ``T_k = U_k diag(S_k)``."""

    T: list

    @classmethod
    def from_factors(cls, f):
        return cls([u * s for u, s in zip(f.U, f.S)])

    def __len__(self):
        return len(self.T)

    def __iter__(self):
        return iter(self.T)

    def __getitem__(self, k):
        return self.T[k]


def frobenius_norm(x):
    """Sum of the slice Frobenius norms."""
    return float(sum(np.linalg.norm(xk) for xk in x))


def frobenius_norm_rss(x):
    """Root of the summed squared entries over all slices."""
    return float(np.sqrt(sum(np.sum(xk * xk) for xk in x)))


def _check_factors(f, visit_counts=None, j=None):
    r = f.rank
    if len(f.S) != len(f.U):
        raise DimensionError(f"{len(f.U)} U factors but {len(f.S)} S factors")
    for k, (u, s) in enumerate(zip(f.U, f.S)):
        if u.ndim != 2 or u.shape[1] != r or np.shape(s) != (r,):
            raise DimensionError(f"slice {k}: U shape {u.shape}, S shape {np.shape(s)}, rank {r}")
        if visit_counts is not None and u.shape[0] != visit_counts[k]:
            raise DimensionError(f"slice {k}: U has {u.shape[0]} rows, X has {visit_counts[k]}")
    if j is not None and f.V.shape[0] != j:
        raise DimensionError(f"V has {f.V.shape[0]} rows, X has {j} columns")
    if visit_counts is not None and len(visit_counts) != len(f.U):
        raise DimensionError(f"{len(f.U)} factor slices for {len(visit_counts)} data slices")


def reconstruct(f):
    """Slices ``U_k diag(S_k) V^T`` as an :class:`IrregularTensor`."""
    _check_factors(f)
    return IrregularTensor(tuple((u * s) @ f.V.T for u, s in zip(f.U, f.S)))


def fit_loss(x, u_list, s_list, v):
    """``sum_k 0.5 * ||X_k - U_k S_k V^T||_F^2``."""
    total = 0.0
    for xk, u, s in zip(x, u_list, s_list):
        r = xk - (u * s) @ v.T
        total += 0.5 * float(np.sum(r * r))
    return total


def svar_residual(t, w, a_lags):
    """``T - T W - sum_p shift_p(T) A_p`` for one trajectory matrix."""
    res = t - t @ w
    for p, a in enumerate(a_lags, start=1):
        res = res - shift_rows(t, p) @ a
    return res


def causal_loss(trajectories, w, a_lags):
    """``sum_k ||T_k - T_k W - sum_p M_p T_k A_p||_F^2 / (2 I_k)``."""
    total = 0.0
    for t in trajectories:
        r = svar_residual(t, w, a_lags)
        total += float(np.sum(r * r)) / (2.0 * t.shape[0])
    return total


def joint_objective(x, f, g, lambda_w, lambda_a):
    """Joint decomposition plus causal objective.

    Parameters
    ----------
    x : IrregularTensor
    f : Parafac2Factors
    g : CausalGraph
        Anything with ``W`` and a list of lag matrices ``A``.
    lambda_w, lambda_a : float
        l1 weights on ``W`` and on the lag matrices.

    Returns
    -------
    float
        ``sum_k 0.5 ||X_k - U_k S_k V^T||^2 + ||T_k (I - W) - sum_p M_p T_k A_p||^2 / (2 I_k)``
        plus ``lambda_w ||W||_1 + lambda_a sum_p ||A_p||_1``, with ``T_k = U_k S_k``.
    """
    _check_factors(f, x.visit_counts, x.J)
    p = len(g.A)
    if p >= min(x.visit_counts):
        raise ValueError(f"lag order {p} must be below the shortest slice length {min(x.visit_counts)}")
    t = TrajectorySet.from_factors(f)
    value = fit_loss(x, f.U, f.S, f.V) + causal_loss(t, g.W, g.A)
    value += lambda_w * float(np.abs(g.W).sum())
    value += lambda_a * float(sum(np.abs(a).sum() for a in g.A))
    return value
