"""Ground-truth benchmark instances.

Graphs are Erdős–Rényi DAGs, factors follow the PARAFAC2 model with binary
``Q_k``, and trajectories are ``U_k S_k`` pushed through the structural VAR
``t_t = (b_t + sum_p t_{t-p} A_p + e_t) (I - W)^{-1}``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from .causal import CausalGraph
from .linalg import h_acyclicity
from .tensor import IrregularTensor, Parafac2Factors, TrajectorySet


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _signed_weights(rng, shape, low, high):
    mag = rng.uniform(low, high, size=shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


def gen_er_dag(d, mean_degree, weight_range=(0.3, 0.5), seed=None):
    """Weighted Erdős–Rényi DAG.

    Each of the ``d (d - 1) / 2`` lower-triangular entries is an edge with
    probability ``mean_degree / d``; nodes are then randomly permuted.
    Weights are uniform on ``[-high, -low] U [low, high]``.
    """
    if d < 1 or mean_degree < 0:
        raise ValueError("need d >= 1 and mean_degree >= 0")
    rng = _rng(seed)
    prob = min(mean_degree / d, 1.0)
    support = np.tril(rng.random((d, d)) < prob, k=-1)
    perm = rng.permutation(d)
    support = support[np.ix_(perm, perm)]
    return support * _signed_weights(rng, (d, d), *weight_range)


def gen_inter_slice(d, p_lags, mean_degree, eta=1.0, seed=None, weight_range=(0.3, 0.5)):
    """Lag matrices ``A^(1..P)``; lag ``p`` weights are scaled by ``eta^-(p-1)``."""
    if eta < 1:
        raise ValueError("eta must be at least 1")
    rng = _rng(seed)
    prob = min(mean_degree / d, 1.0)
    out = []
    for p in range(1, p_lags + 1):
        scale = eta ** -(p - 1)
        support = rng.random((d, d)) < prob
        low, high = weight_range
        out.append(support * _signed_weights(rng, (d, d), low * scale, high * scale))
    return out


def cluster_v(v, factor=0.05):
    """Scale each column outside its own contiguous row block by ``factor``."""
    v = np.array(v, dtype=float)
    j, r = v.shape
    mask = np.full((j, r), factor)
    for col, rows in enumerate(np.array_split(np.arange(j), r)):
        mask[rows, col] = 1.0
    return v * mask


def gen_factors(k_slices, j_features, rank, visit_range=(10, 21), seed=None, q_mode="binary",
                value_range=(5.0, 10.0)):
    """PARAFAC2 factors with ``U_k = Q_k H``.

    ``H``, the diagonals of ``S_k`` and ``V`` are uniform on ``value_range``;
    ``V`` is then given a block cluster structure (:func:`cluster_v`).
    ``q_mode="binary"`` places a single 1 in each column of ``Q_k`` on
    distinct random rows; ``"haar"`` draws a Haar-random orthonormal ``Q_k``.
    """
    if q_mode not in ("binary", "haar"):
        raise ValueError(f"unknown q_mode {q_mode!r}")
    rng = _rng(seed)
    lo, hi = visit_range
    if hi < rank:
        raise ValueError(f"visit range {visit_range} cannot hold rank {rank}")
    h = rng.uniform(*value_range, size=(rank, rank))
    v = cluster_v(rng.uniform(*value_range, size=(j_features, rank)))
    u_list, s_list, q_list = [], [], []
    for _ in range(k_slices):
        i_k = int(rng.integers(lo, hi + 1))
        while i_k < rank:
            i_k = int(rng.integers(lo, hi + 1))
        if q_mode == "binary":
            q = np.zeros((i_k, rank))
            q[rng.choice(i_k, size=rank, replace=False), np.arange(rank)] = 1.0
        else:
            g = rng.standard_normal((i_k, rank))
            q, tri = np.linalg.qr(g)
            q = q * np.sign(np.diag(tri))
        q_list.append(q)
        u_list.append(q @ h)
        s_list.append(rng.uniform(*value_range, size=rank))
    return Parafac2Factors(U=u_list, S=s_list, V=v, Q=q_list, H=h)


def propagate_svar(base, graph, innovations=None):
    """Push exogenous rows through the structural VAR.

    Row ``t`` of slice ``k`` is ``(b_t + sum_p t_{t-p} A_p + e_t)(I - W)^{-1}``
    where lagged rows before the start of the series are zero, so the first
    rows carry only the contemporaneous mixing of their drive.

    Parameters
    ----------
    base : TrajectorySet or list of ndarray
        Exogenous drive ``b`` per slice.
    graph : CausalGraph
        Must have acyclic ``W``.
    innovations : list of ndarray, optional
        Additive noise ``e`` per slice, shaped like ``base``.
    """
    r = graph.R
    lu = scipy.linalg.lu_factor((np.eye(r) - graph.W).T)
    out = []
    for k, b in enumerate(base):
        b = np.asarray(b, dtype=float)
        drive = b if innovations is None else b + innovations[k]
        t = np.zeros_like(drive)
        for row in range(drive.shape[0]):
            acc = drive[row].copy()
            for p, a in enumerate(graph.A, start=1):
                if row - p >= 0:
                    acc += t[row - p] @ a
            t[row] = scipy.linalg.lu_solve(lu, acc)
        out.append(t)
    return TrajectorySet(out)


@dataclass
class SimulationParams:
    """Knobs of a benchmark instance."""

    k_slices: int = 100
    j_features: int = 12
    rank: int = 4
    visit_range: tuple = (10, 21)
    lag: int = 1
    mean_degree_w: float = 2.0
    mean_degree_a: float = 1.0
    eta: float = 2.0
    noise_level: float = 0.0
    svar_noise: float = 0.01
    q_mode: str = "binary"
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["visit_range"] = list(self.visit_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "visit_range" in d:
            d["visit_range"] = tuple(d["visit_range"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown simulation parameters: {sorted(unknown)}")
        return cls(**d)


@dataclass
class GroundTruth:
    """A generated instance together with everything used to build it.

    ``drive`` holds ``U_k S_k + e_k``, the exogenous term of the SVAR for
    each slice.
    """

    factors: Parafac2Factors
    graph: CausalGraph
    trajectories: TrajectorySet
    tensor: IrregularTensor
    drive: list
    params: SimulationParams = field(default_factory=SimulationParams)

    @property
    def noise_level(self):
        return self.params.noise_level

    @property
    def eta(self):
        return self.params.eta

    @property
    def mean_degree(self):
        return self.params.mean_degree_w


def assemble_instance(params=None, **overrides):
    """Generate a :class:`GroundTruth` from ``params`` (or keyword overrides).

    The SVAR innovations have entrywise sd ``svar_noise * ||b_t|| / sqrt(R)``
    per row, and the observation noise on ``X_k = T_k V^T`` has sd
    ``noise_level`` times the sd of the clean entries of that slice.
    """
    if params is None:
        params = SimulationParams(**overrides)
    elif overrides:
        params = SimulationParams(**{**params.to_dict(), **overrides})
    seeds = np.random.SeedSequence(params.seed).spawn(5)
    r = params.rank
    w = gen_er_dag(r, params.mean_degree_w, seed=np.random.default_rng(seeds[0]))
    a = gen_inter_slice(r, params.lag, params.mean_degree_a, params.eta,
                        seed=np.random.default_rng(seeds[1]))
    graph = CausalGraph(w, a)
    assert h_acyclicity(w) <= 1e-10
    factors = gen_factors(params.k_slices, params.j_features, r, params.visit_range,
                          seed=np.random.default_rng(seeds[2]), q_mode=params.q_mode)
    base = TrajectorySet.from_factors(factors)

    rng_svar = np.random.default_rng(seeds[3])
    innovations = []
    for b in base:
        sd = params.svar_noise * np.linalg.norm(b, axis=1, keepdims=True) / np.sqrt(r)
        innovations.append(sd * rng_svar.standard_normal(b.shape))
    traj = propagate_svar(base, graph, innovations)

    rng_obs = np.random.default_rng(seeds[4])
    slices = []
    for t in traj:
        clean = t @ factors.V.T
        noise = rng_obs.standard_normal(clean.shape)
        slices.append(clean + params.noise_level * clean.std() * noise)
    drive = [b + e for b, e in zip(base, innovations)]
    return GroundTruth(factors, graph, traj, IrregularTensor(tuple(slices)), drive, params)
