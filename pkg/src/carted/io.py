"""On-disk formats: slice CSVs, shape-headed matrices, manifests and run directories.

Floats are written with ``repr``, the shortest decimal that parses back to
the same double, so every write/read round trip is exact. All writes go to
a temporary file in the target directory and are then renamed into place.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import yaml

from .causal import CausalGraph
from .errors import DimensionError
from .tensor import IrregularTensor, Parafac2Factors, TrajectorySet

FORMAT_VERSION = 1
SHAPE_PREFIX = "# shape:"


def write_text_atomic(path, text):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _format_rows(m):
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in m)


def _as_matrix(m):
    m = np.asarray(m, dtype=float)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {m.shape}")
    return m


def write_matrix(path, m):
    """Matrix file: a ``# shape: r,c`` line, then comma-delimited rows."""
    m = _as_matrix(m)
    write_text_atomic(path, f"{SHAPE_PREFIX} {m.shape[0]},{m.shape[1]}\n" + _format_rows(m))


def _parse_rows(lines, path):
    rows = [[float(v) for v in line.split(",")] for line in lines if line.strip()]
    if rows and len({len(r) for r in rows}) != 1:
        raise DimensionError(f"{path}: ragged rows")
    return rows


def read_matrix(path):
    """Inverse of :func:`write_matrix`; checks the declared shape."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(SHAPE_PREFIX):
        raise ValueError(f"{path}: missing '{SHAPE_PREFIX}' header")
    r, c = (int(v) for v in lines[0][len(SHAPE_PREFIX):].split(","))
    rows = _parse_rows(lines[1:], path)
    m = np.array(rows, dtype=float).reshape(len(rows), c if not rows else len(rows[0]))
    if m.shape != (r, c):
        raise DimensionError(f"{path}: header says {(r, c)}, found {m.shape}")
    return m


def write_slice(path, x):
    """Slice file: one row per visit, ``J`` comma-delimited columns, no header."""
    write_text_atomic(path, _format_rows(_as_matrix(x)))


def read_slice(path, j=None):
    rows = _parse_rows(Path(path).read_text(encoding="utf-8").splitlines(), path)
    if not rows:
        raise DimensionError(f"{path}: slice has no rows")
    x = np.array(rows, dtype=float)
    if j is not None and x.shape[1] != j:
        raise DimensionError(f"{path}: {x.shape[1]} columns, expected {j}")
    return x


def write_json(path, obj):
    write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def read_config(path):
    """YAML (or JSON) key-value tree; an empty file is an empty config."""
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping, got {type(data).__name__}")
    return data


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetManifest:
    """Index of a dataset directory; paths are relative to the manifest."""

    K: int
    J: int
    slices: list
    format_version: int = FORMAT_VERSION
    feature_labels: list | None = None
    ground_truth: dict | None = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        if d.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
            raise ValueError(f"unsupported manifest version {d['format_version']}")
        return cls(**d)


def _indexed(stem, k):
    return f"{stem}_{k:05d}.csv"


def save_dataset(out_dir, tensor, truth=None, feature_labels=None):
    """Write slices, optional ground truth and ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    records = []
    for k, x in enumerate(tensor):
        rel = f"slices/{_indexed('slice', k)}"
        write_slice(out / rel, x)
        records.append({"id": k, "visits": int(x.shape[0]), "path": rel})
    gt_paths = None
    if truth is not None:
        gt_paths = _save_truth(out, truth)
    manifest = DatasetManifest(K=tensor.K, J=tensor.J, slices=records,
                               feature_labels=list(feature_labels) if feature_labels else None,
                               ground_truth=gt_paths)
    path = out / "manifest.json"
    write_json(path, manifest.to_dict())
    return path


def _save_truth(out, truth):
    f, g = truth.factors, truth.graph
    paths = {"W": "truth/W.csv", "V": "truth/V.csv", "H": "truth/H.csv", "S": "truth/S.csv",
             "A": [], "Q": [], "trajectories": [], "drive": [], "params": "truth/params.json"}
    write_matrix(out / paths["W"], g.W)
    write_matrix(out / paths["V"], f.V)
    write_matrix(out / paths["H"], f.H)
    write_matrix(out / paths["S"], np.vstack(f.S))
    for p, a in enumerate(g.A, start=1):
        rel = f"truth/A_{p}.csv"
        write_matrix(out / rel, a)
        paths["A"].append({"lag": p, "path": rel})
    for key, mats in (("Q", f.Q), ("trajectories", truth.trajectories), ("drive", truth.drive)):
        for k, m in enumerate(mats):
            rel = f"truth/{key}/{_indexed(key, k)}"
            write_matrix(out / rel, m)
            paths[key].append(rel)
    write_json(out / paths["params"], truth.params.to_dict())
    return paths


def read_manifest(path):
    return DatasetManifest.from_dict(read_json(path))


def load_dataset(manifest_path):
    """``(IrregularTensor, DatasetManifest)`` from a manifest."""
    manifest = read_manifest(manifest_path)
    base = Path(manifest_path).parent
    if len(manifest.slices) != manifest.K:
        raise DimensionError(f"manifest lists {len(manifest.slices)} slices, declares K={manifest.K}")
    slices = []
    for rec in manifest.slices:
        x = read_slice(base / rec["path"], manifest.J)
        if x.shape[0] != rec["visits"]:
            raise DimensionError(f"{rec['path']}: {x.shape[0]} rows, manifest says {rec['visits']}")
        slices.append(x)
    return IrregularTensor(tuple(slices)), manifest


def _read_lags(base, entries):
    entries = sorted(entries, key=lambda e: e["lag"])
    if [e["lag"] for e in entries] != list(range(1, len(entries) + 1)):
        raise ValueError("lag index must list lags 1..P exactly once")
    return [read_matrix(base / e["path"]) for e in entries]


def load_ground_truth(manifest_path):
    """Rebuild the :class:`~carted.synthetic.GroundTruth` stored next to a manifest."""
    from .synthetic import GroundTruth, SimulationParams

    tensor, manifest = load_dataset(manifest_path)
    gt = manifest.ground_truth
    if not gt:
        raise ValueError(f"{manifest_path}: no ground truth recorded")
    base = Path(manifest_path).parent
    h = read_matrix(base / gt["H"])
    q = [read_matrix(base / p) for p in gt["Q"]]
    s = read_matrix(base / gt["S"])
    factors = Parafac2Factors(U=[qk @ h for qk in q], S=list(s), V=read_matrix(base / gt["V"]),
                              Q=q, H=h)
    graph = CausalGraph(read_matrix(base / gt["W"]), _read_lags(base, gt["A"]))
    traj = TrajectorySet([read_matrix(base / p) for p in gt["trajectories"]])
    drive = [read_matrix(base / p) for p in gt["drive"]]
    params = SimulationParams.from_dict(read_json(base / gt["params"]))
    return GroundTruth(factors, graph, traj, tensor, drive, params)


# ---------------------------------------------------------------------------
# fit outputs


def save_graph(out_dir, graph):
    out = Path(out_dir)
    write_matrix(out / "W.csv", graph.W)
    lags = []
    for p, a in enumerate(graph.A, start=1):
        write_matrix(out / f"A_{p}.csv", a)
        lags.append({"lag": p, "path": f"A_{p}.csv"})
    write_json(out / "lags.json", {"lags": lags})


def load_graph(graph_dir):
    base = Path(graph_dir)
    return CausalGraph(read_matrix(base / "W.csv"), _read_lags(base, read_json(base / "lags.json")["lags"]))


def trace_text(report):
    """Trace as comma-delimited text with a header row."""
    header, rows = report.trace_table()

    def cell(v):
        if isinstance(v, bool):
            return "1" if v else "0"
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        return repr(float(v))

    return ",".join(header) + "\n" + "".join(",".join(cell(v) for v in row) + "\n" for row in rows)


def save_fit(out_dir, factors, graph, report, config=None):
    """Write factors, graph, trace and summary of a fit into ``out_dir``.

    Wall time goes to ``timing.json`` so that every other file is a
    deterministic function of the data and the configuration.
    """
    out = Path(out_dir)
    fdir = out / "factors"
    write_matrix(fdir / "V.csv", factors.V)
    write_matrix(fdir / "S.csv", np.vstack(factors.S))
    if factors.H is not None:
        write_matrix(fdir / "H.csv", factors.H)
    for k, u in enumerate(factors.U):
        write_matrix(fdir / "U" / _indexed("U", k), u)
    for k, q in enumerate(factors.Q):
        write_matrix(fdir / "Q" / _indexed("Q", k), q)
    if graph is not None:
        save_graph(out / "graph", graph)
    write_text_atomic(out / "trace.csv", trace_text(report))
    summary = {
        "termination": report.termination,
        "iterations": report.iterations,
        "causal_iterations": report.causal_iterations,
        "causal_converged": report.causal_converged,
        "h": report.h,
        "orthonormality_error": report.orthonormality_error,
        "projection_error": report.projection_error,
        "K": len(factors.U),
        "rank": factors.rank,
    }
    if config is not None:
        summary["config"] = config
    write_json(out / "summary.json", summary)
    write_json(out / "timing.json", {"wall_time": report.wall_time})


def load_fit(run_dir):
    """``(Parafac2Factors, CausalGraph or None, summary dict)`` from a run directory."""
    base = Path(run_dir)
    summary = read_json(base / "summary.json")
    fdir = base / "factors"
    k = summary["K"]
    u = [read_matrix(fdir / "U" / _indexed("U", i)) for i in range(k)]
    q_dir = fdir / "Q"
    q = [read_matrix(q_dir / _indexed("Q", i)) for i in range(k)] if q_dir.exists() else []
    h = read_matrix(fdir / "H.csv") if (fdir / "H.csv").exists() else None
    factors = Parafac2Factors(U=u, S=list(read_matrix(fdir / "S.csv")),
                              V=read_matrix(fdir / "V.csv"), Q=q, H=h)
    graph = load_graph(base / "graph") if (base / "graph" / "W.csv").exists() else None
    return factors, graph, summary
