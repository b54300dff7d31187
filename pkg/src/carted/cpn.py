"""Causal phenotype network: one diagram from the thresholded W and A graphs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import CyclicGraphError, DimensionError
from .linalg import find_cycle


class Edge(NamedTuple):
    source: int
    target: int
    weight: float
    lag: int


@dataclass
class CpnSummary:
    """Node labels, contemporaneous edges and the lagged edges that complement them.

    ``intra`` holds every ``W`` entry above its threshold (``lag = 0``).
    ``temporal`` holds, for each ordered pair not already in ``intra``, the
    strongest above-threshold entry across all lag matrices.
    """

    labels: list
    intra: list
    temporal: list

    @property
    def edges(self):
        return self.intra + self.temporal

    def to_dict(self):
        def rows(edges):
            return [{"source": self.labels[e.source], "target": self.labels[e.target],
                     "weight": e.weight, "lag": e.lag} for e in edges]

        return {"labels": [str(x) for x in self.labels], "intra": rows(self.intra),
                "temporal": rows(self.temporal)}

    def edge_table(self):
        """Plot-ready ``(header, rows)``; ``kind`` is ``intra`` or ``temporal``."""
        header = ["source", "target", "weight", "lag", "kind"]
        out = [[self.labels[e.source], self.labels[e.target], e.weight, e.lag, "intra"]
               for e in self.intra]
        out += [[self.labels[e.source], self.labels[e.target], e.weight, e.lag, "temporal"]
                for e in self.temporal]
        return header, out


def summarize_cpn(w, a_lags, tau_w=0.03, tau_a=0.03, labels=None, self_loops=False):
    """Merge thresholded ``W`` and ``A^(p)`` into a single causal diagram.

    Parameters
    ----------
    w : ndarray, shape (R, R)
        ``w[i, j]`` is the effect of node ``i`` on node ``j``.
    a_lags : list of ndarray
        Lag matrices ``A^(1..P)``.
    tau_w, tau_a : float
        Entries with magnitude at or below the threshold are dropped.
    labels : sequence, optional
        Node names; defaults to ``0..R-1``.
    self_loops : bool
        Keep lagged ``i -> i`` persistence edges. They are dropped by default
        because every trajectory trivially depends on its own past.

    Raises
    ------
    CyclicGraphError
        If the thresholded ``W`` is not a DAG; the message names one cycle.
    """
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise DimensionError(f"W must be square, got shape {w.shape}")
    r = w.shape[0]
    a_lags = [np.asarray(a, dtype=float) for a in a_lags]
    for a in a_lags:
        if a.shape != w.shape:
            raise DimensionError(f"lag matrix shape {a.shape} differs from W {w.shape}")
    if tau_w < 0 or tau_a < 0:
        raise ValueError("thresholds must be non-negative")
    labels = list(range(r)) if labels is None else list(labels)
    if len(labels) != r:
        raise DimensionError(f"{len(labels)} labels for {r} nodes")

    w_support = np.abs(w) > tau_w
    cycle = find_cycle(w_support)
    if cycle is not None:
        raise CyclicGraphError(cycle, labels)
    intra = [Edge(int(i), int(j), float(w[i, j]), 0) for i, j in zip(*np.nonzero(w_support))]

    temporal = []
    if a_lags:
        stack = np.stack(a_lags)
        best_lag = np.argmax(np.abs(stack), axis=0)
        for i in range(r):
            for j in range(r):
                if w_support[i, j] or (i == j and not self_loops):
                    continue
                p = int(best_lag[i, j])
                if abs(stack[p, i, j]) > tau_a:
                    temporal.append(Edge(i, j, float(stack[p, i, j]), p + 1))
    return CpnSummary(labels, intra, temporal)
