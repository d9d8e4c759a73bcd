"""Command-line entry point.

Subcommands cover ingestion, single training runs, the seeded
evaluation protocol and the two sweep drivers. Results are emitted as
line-delimited JSON records (one object per line) with the resolved
configuration echoed first, so every artifact carries its provenance.

Flag precedence: command-line > --config file (JSON) > built-in
defaults. APGCN_SEED overrides the default seed. Exit codes: 0 on
success, 2 for usage/IO problems, 3 for numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import dataio, protocol
from .nn import DivergenceError
from .training import GraphRuntime, TrainConfig, train


def _g6(x):
    """Round floats to 6 significant digits for output."""
    if isinstance(x, float):
        return float(f"{x:.6g}")
    return x


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return _g6(float(obj))
    return obj


class RecordWriter:
    def __init__(self, path):
        self.fh = open(path, "w") if path else sys.stdout
        self.owns = path is not None

    def write(self, record: dict):
        self.fh.write(json.dumps(_jsonable(record)) + "\n")

    def close(self):
        if self.owns:
            self.fh.close()


def _default_seed() -> int:
    return int(os.environ.get("APGCN_SEED", "1"))


_TRAIN_FIELDS = {
    "alpha": float, "epsilon": float, "max_steps": int, "hidden": int,
    "dropout": float, "lr": float, "l2_first_layer": float, "patience": int,
    "max_epochs": int, "halt_update_every": int, "p_mode": str,
    "penalty_mode": str, "operator": str, "dtype": str,
}


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--alpha", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--l2", dest="l2_first_layer", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--halt-update-every", dest="halt_update_every", type=int)
    p.add_argument("--p-mode", dest="p_mode", choices=["act", "literal"])
    p.add_argument("--penalty-mode", dest="penalty_mode",
                   choices=["per_train_node", "total"])
    p.add_argument("--operator", choices=["renorm_adjacency", "sym_laplacian"])
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--config", help="JSON file with defaults for any flag")


def _resolve_config(args) -> TrainConfig:
    file_vals = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_vals = json.load(fh)
    kwargs = {}
    for name, cast in _TRAIN_FIELDS.items():
        flag_val = getattr(args, name, None)
        if flag_val is not None:
            kwargs[name] = flag_val
        elif name in file_vals:
            kwargs[name] = cast(file_vals[name])
    return TrainConfig(**kwargs)


def _splits_args(p: argparse.ArgumentParser):
    p.add_argument("--n-per-class", dest="n_per_class", type=int, default=20)
    p.add_argument("--visible-size", dest="visible_size", type=int, default=1500)
    p.add_argument("--stopping-size", dest="stopping_size", type=int, default=500)


def cmd_ingest(args) -> int:
    g = dataio.ingest_text(args.edges, args.features, args.labels)
    dataio.save_bundle(g, args.out)
    # degree printed in the double-counted convention of the usual
    # dataset tables (each undirected edge adds 2 to both endpoints)
    avg_degree = 4.0 * g.n_edges / g.n_nodes
    print(f"Classes {g.n_classes} Features {g.d_features} "
          f"Nodes {g.n_nodes} Edges {g.n_edges} Avg. Degree {avg_degree:.2f}")
    print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if args.fixed_steps is not None:
        cfg.fixed_steps = args.fixed_steps
    g = dataio.load_bundle(args.bundle)
    rt = GraphRuntime(g, cfg)
    splits = protocol.make_splits(g, args.split_seed, args.n_per_class,
                                  args.visible_size, args.stopping_size)
    params = rt.init_params(np.random.default_rng(args.init_seed))

    out = RecordWriter(args.out)
    try:
        out.write({"type": "config", "command": "train", "bundle": args.bundle,
                   "split_seed": args.split_seed, "init_seed": args.init_seed,
                   "n_per_class": args.n_per_class,
                   "visible_size": args.visible_size,
                   "stopping_size": args.stopping_size, **asdict(cfg)})
        t0 = time.perf_counter()
        params, history = train(rt, splits, params, cfg,
                                protocol._run_seed(args.split_seed, args.init_seed))
        elapsed = time.perf_counter() - t0
        for rec in history:
            out.write({"type": "epoch", **asdict(rec)})
        acc, _, mean_steps, hist = rt.eval_stats(params, splits.test)
        run = {"type": "run", "split_seed": args.split_seed,
               "init_seed": args.init_seed, "test_accuracy": acc,
               "mean_steps": mean_steps, "step_histogram": hist,
               "epochs_run": len(history)}
        ms_per_epoch = 1000.0 * elapsed / max(len(history), 1)
        if args.timing:   # volatile field, off by default so reruns are byte-identical
            run["wall_time_ms_per_epoch"] = ms_per_epoch
        out.write(run)
        out.write({"type": "summary", "test_accuracy": acc,
                   "mean_steps": mean_steps, "epochs_run": len(history)})
    finally:
        out.close()
    print(f"test accuracy {acc:.6g}  mean steps {mean_steps:.6g}  "
          f"epochs {len(history)}  ({ms_per_epoch:.6g} ms/epoch)", file=sys.stderr)
    return 0


def _parse_seed_list(text: str):
    return tuple(int(tok) for tok in text.split(",") if tok)


def _make_plan(args, cfg) -> protocol.ExperimentPlan:
    return protocol.ExperimentPlan(
        split_seeds=_parse_seed_list(args.split_seeds),
        init_seeds=_parse_seed_list(args.init_seeds),
        n_per_class=args.n_per_class, visible_size=args.visible_size,
        stopping_size=args.stopping_size, config=cfg,
        dataset=os.path.basename(args.bundle))


def _plan_args(p):
    p.add_argument("--split-seeds", default="1,2,3,4,5,6,7,8,9,10,"
                   "11,12,13,14,15,16,17,18,19,20",
                   help="comma-separated list")
    p.add_argument("--init-seeds", default="1,2,3,4,5")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--bootstrap-seed", dest="bootstrap_seed", type=int,
                   default=int(os.environ.get("APGCN_SEED", "0")))


def cmd_protocol(args) -> int:
    cfg = _resolve_config(args)
    g = dataio.load_bundle(args.bundle)
    plan = _make_plan(args, cfg)
    out = RecordWriter(args.out)
    try:
        out.write({"type": "config", "command": "protocol", "bundle": args.bundle,
                   "split_seeds": list(plan.split_seeds),
                   "init_seeds": list(plan.init_seeds),
                   "n_per_class": plan.n_per_class,
                   "visible_size": plan.visible_size,
                   "stopping_size": plan.stopping_size, **asdict(cfg)})
        results, failures = protocol.run_grid(plan, g, jobs=args.jobs,
                                              continue_on_error=True)
        for r in results:
            out.write({"type": "run", **asdict(r)})
        for s, i, msg in failures:
            out.write({"type": "failure", "split_seed": s, "init_seed": i,
                       "error": msg})
        if results:
            accs = [r.test_accuracy for r in results]
            mean, lo, hi = protocol.bootstrap_ci(accs, seed=args.bootstrap_seed)
            density = np.mean([r.step_histogram / r.step_histogram.sum()
                               for r in results], axis=0)
            out.write({"type": "summary", "runs": len(results),
                       "accuracy_mean": mean, "accuracy_lo": lo,
                       "accuracy_hi": hi,
                       "mean_steps": float(np.mean([r.mean_steps for r in results])),
                       "step_density": density})
            print(f"{len(results)} runs  accuracy {100 * mean:.2f} "
                  f"[{100 * lo:.2f}, {100 * hi:.2f}]", file=sys.stderr)
    finally:
        out.close()
    return 0


def _write_sweep(out, points, key, max_steps):
    for pt in points:
        out.write({"type": "sweep_point", key: pt.value,
                   "accuracy_mean": pt.accuracy_mean,
                   "accuracy_lo": pt.accuracy_lo, "accuracy_hi": pt.accuracy_hi,
                   "mean_steps": pt.mean_steps, "n_runs": pt.n_runs,
                   "step_density": pt.step_density})
        for s, i, msg in pt.failures:
            out.write({"type": "failure", key: pt.value, "split_seed": s,
                       "init_seed": i, "error": msg})
    # density table: one row per step count, one column per swept value
    out.write({"type": "density_table",
               "columns": [pt.value for pt in points],
               "rows": [{"step": k + 1,
                         "density": [pt.step_density[k] for pt in points]}
                        for k in range(max_steps)]})


def cmd_sweep_alpha(args) -> int:
    cfg = _resolve_config(args)
    g = dataio.load_bundle(args.bundle)
    plan = _make_plan(args, cfg)
    out = RecordWriter(args.out)
    try:
        out.write({"type": "config", "command": "sweep-alpha",
                   "bundle": args.bundle, "alphas": list(args.alphas),
                   "split_seeds": list(plan.split_seeds),
                   "init_seeds": list(plan.init_seeds),
                   "n_per_class": plan.n_per_class, **asdict(cfg)})
        points = protocol.sweep_alpha(plan, g, args.alphas, jobs=args.jobs,
                                      seed=args.bootstrap_seed)
        _write_sweep(out, points, "alpha", cfg.max_steps)
    finally:
        out.close()
    return 0


def cmd_sweep_trainsize(args) -> int:
    cfg = _resolve_config(args)
    g = dataio.load_bundle(args.bundle)
    plan = _make_plan(args, cfg)
    out = RecordWriter(args.out)
    try:
        out.write({"type": "config", "command": "sweep-trainsize",
                   "bundle": args.bundle, "sizes": list(args.sizes),
                   "split_seeds": list(plan.split_seeds),
                   "init_seeds": list(plan.init_seeds), **asdict(cfg)})
        points = protocol.sweep_train_size(plan, g, args.sizes, jobs=args.jobs,
                                           seed=args.bootstrap_seed)
        _write_sweep(out, points, "n_per_class", cfg.max_steps)
    finally:
        out.close()
    return 0


def cmd_sbm(args) -> int:
    spec = dataio.SbmSpec(blocks=args.blocks, nodes_per_block=args.nodes_per_block,
                          p_in=args.p_in, p_out=args.p_out,
                          feature_noise=args.feature_noise, seed=args.seed)
    from .graph import l1_normalize_features, largest_connected_component
    g = l1_normalize_features(largest_connected_component(dataio.generate_sbm(spec)))
    dataio.save_bundle(g, args.out)
    print(f"Classes {g.n_classes} Features {g.d_features} "
          f"Nodes {g.n_nodes} Edges {g.n_edges}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="apgcn",
                                 description="adaptive-propagation node classifier")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert text files to a bundle")
    p.add_argument("--edges", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="one training run")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--split-seed", dest="split_seed", type=int,
                   default=_default_seed())
    p.add_argument("--init-seed", dest="init_seed", type=int,
                   default=_default_seed())
    p.add_argument("--fixed-steps", dest="fixed_steps", type=int, default=None,
                   help="disable halting, propagate this fixed depth")
    p.add_argument("--timing", action="store_true",
                   help="include wall-clock fields in the output records")
    _add_train_flags(p)
    _splits_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("protocol", help="seeded multi-run evaluation")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", default=None)
    _add_train_flags(p)
    _splits_args(p)
    _plan_args(p)
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("sweep-alpha", help="grid per propagation penalty")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--alphas", type=float, nargs="+", required=True)
    _add_train_flags(p)
    _splits_args(p)
    _plan_args(p)
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("sweep-trainsize", help="grid per labeled-nodes-per-class")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--sizes", type=int, nargs="+", required=True)
    _add_train_flags(p)
    _splits_args(p)
    _plan_args(p)
    p.set_defaults(func=cmd_sweep_trainsize)

    p = sub.add_parser("sbm", help="generate a synthetic block-model bundle")
    p.add_argument("--blocks", type=int, default=8)
    p.add_argument("--nodes-per-block", dest="nodes_per_block", type=int,
                   default=150)
    p.add_argument("--p-in", dest="p_in", type=float, default=0.05)
    p.add_argument("--p-out", dest="p_out", type=float, default=0.005)
    p.add_argument("--feature-noise", dest="feature_noise", type=float,
                   default=2.0)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sbm)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (dataio.BundleFormatError, dataio.IngestError, protocol.SplitError,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
