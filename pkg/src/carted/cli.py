"""Command line: ``carted simulate | fit | eval | summarize-cpn``.

Every command exits 0 on success. Failures print one JSON object
(``{"error": ..., "message": ...}``) on stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path

from .errors import DivergenceError
from .io import (load_dataset, load_fit, load_graph, load_ground_truth, read_config, save_dataset,
                 save_fit, trace_text, write_json, write_text_atomic)

EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3


class CliError(Exception):
    def __init__(self, message, code=EXIT_ERROR, kind="error"):
        super().__init__(message)
        self.code = code
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message, EXIT_USAGE, "usage")


def _thread_limit():
    """Cap BLAS threads when ``CARTED_THREADS`` is set."""
    value = os.environ.get("CARTED_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise CliError(f"CARTED_THREADS must be an integer, got {value!r}", EXIT_USAGE,
                       "usage") from None
    if n < 1:
        raise CliError("CARTED_THREADS must be at least 1", EXIT_USAGE, "usage")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _print_json(obj):
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args):
    from .synthetic import SimulationParams, assemble_instance

    cfg = read_config(args.config)
    labels = cfg.pop("feature_labels", None)
    if args.seed is not None:
        cfg["seed"] = args.seed
    truth = assemble_instance(SimulationParams.from_dict(cfg))
    manifest = save_dataset(args.out, truth.tensor, truth=truth, feature_labels=labels)
    _print_json({"manifest": str(manifest), "K": truth.tensor.K, "J": truth.tensor.J})


def _solver_config(args):
    from .solver import SolverConfig

    cfg = read_config(args.config)
    warm = cfg.pop("warm_start", None)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.mode is not None:
        cfg["mode"] = args.mode.replace("-", "_")
    if args.threshold_w is not None:
        cfg["tau_w"] = args.threshold_w
    if args.threshold_a is not None:
        cfg["tau_a"] = args.threshold_a
    return SolverConfig.from_dict(cfg), warm


def cmd_fit(args):
    from .solver import fit, warm_start_v

    x, _ = load_dataset(args.manifest)
    cfg, warm = _solver_config(args)
    if warm:
        unknown = set(warm) - {"n_runs", "threshold"}
        if unknown:
            raise CliError(f"unknown warm_start options: {sorted(unknown)}")
        cfg = cfg.replace(warm_start_V=warm_start_v(x, cfg, **warm))
    record = cfg.to_dict()
    if warm:
        record["warm_start"] = warm
    try:
        factors, graph, report = fit(x, cfg)
    except DivergenceError as exc:
        if exc.report is not None:
            out = Path(args.out)
            write_text_atomic(out / "trace.csv", trace_text(exc.report))
        raise CliError(str(exc), EXIT_DIVERGED, "diverged") from exc
    save_fit(args.out, factors, graph, report, record)
    _print_json({"out": str(args.out), "termination": report.termination,
                 "iterations": report.iterations, "h": report.h})


def _truth_manifest(path):
    path = Path(path)
    return path / "manifest.json" if path.is_dir() else path


def cmd_eval(args):
    from .metrics import evaluate

    factors, graph, summary = load_fit(args.run_dir)
    truth = load_ground_truth(_truth_manifest(args.truth))
    cfg = summary.get("config", {})
    tau_w = args.threshold_w if args.threshold_w is not None else cfg.get("tau_w", 0.3)
    tau_a = args.threshold_a if args.threshold_a is not None else cfg.get("tau_a", 0.1)
    if len(factors.U) != truth.tensor.K or factors.V.shape != truth.factors.V.shape:
        raise CliError(f"fit has K={len(factors.U)}, V {factors.V.shape}; truth has "
                       f"K={truth.tensor.K}, V {truth.factors.V.shape}", kind="shape")
    for k, (u, x) in enumerate(zip(factors.U, truth.tensor)):
        if u.shape[0] != x.shape[0]:
            raise CliError(f"slice {k}: fit has {u.shape[0]} rows, truth {x.shape[0]}", kind="shape")
    report = evaluate(truth, factors, graph, tau_w=tau_w, tau_a=tau_a).to_dict()
    report.update(tau_w=tau_w, tau_a=tau_a)
    out = Path(args.out) if args.out else Path(args.run_dir) / "metrics.json"
    write_json(out, report)
    _print_json(report)


def cmd_summarize_cpn(args):
    from .cpn import summarize_cpn

    graph = load_graph(args.graph_dir)
    labels = args.labels.split(",") if args.labels else None
    summary = summarize_cpn(graph.W, graph.A, tau_w=args.threshold_w, tau_a=args.threshold_a,
                            labels=labels, self_loops=args.self_loops)
    if args.out:
        out = Path(args.out)
        write_json(out / "cpn.json", summary.to_dict())
        header, rows = summary.edge_table()
        text = ",".join(header) + "\n" + "".join(
            ",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n" for row in rows)
        write_text_atomic(out / "cpn_edges.csv", text)
    _print_json(summary.to_dict())


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="carted", description="Causal PARAFAC2 decomposition of irregular tensors.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic dataset with ground truth")
    s.add_argument("--config", help="YAML simulation parameters")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit factors and graph to a dataset")
    f.add_argument("manifest")
    f.add_argument("--config", help="YAML solver options (plus optional warm_start)")
    f.add_argument("--out", required=True)
    f.add_argument("--mode", choices=["joint", "two-step"])
    f.add_argument("--seed", type=int)
    f.add_argument("--threshold-w", type=float)
    f.add_argument("--threshold-a", type=float)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="score a fit against ground truth")
    e.add_argument("run_dir")
    e.add_argument("truth", help="dataset directory or manifest with ground truth")
    e.add_argument("--out", help="metrics file (default: RUN_DIR/metrics.json)")
    e.add_argument("--threshold-w", type=float)
    e.add_argument("--threshold-a", type=float)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("summarize-cpn", help="merge thresholded W and A into one diagram")
    c.add_argument("graph_dir", help="directory with W.csv, A_p.csv and lags.json")
    c.add_argument("--threshold-w", type=float, default=0.03)
    c.add_argument("--threshold-a", type=float, default=0.03)
    c.add_argument("--labels", help="comma-separated node names")
    c.add_argument("--self-loops", action="store_true", help="keep lagged i -> i edges")
    c.add_argument("--out")
    c.set_defaults(func=cmd_summarize_cpn)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        with _thread_limit():
            args.func(args)
    except CliError as exc:
        _fail(exc.kind, str(exc))
        return exc.code
    except (OSError, ValueError, ArithmeticError, KeyError) as exc:
        _fail(type(exc).__name__, str(exc))
        return EXIT_ERROR
    return 0


def _fail(kind, message):
    print(json.dumps({"error": kind, "message": " ".join(message.split())}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
