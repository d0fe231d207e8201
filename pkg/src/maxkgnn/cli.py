"""Command-line entry point: ``maxkgnn {partition,bench,traffic,train,approx}``.

Options may also come from a ``key=value`` file given with ``--config``;
command-line flags take precedence. Text outputs start with ``#``-prefixed
metadata lines recording the tool version, resolved configuration, seed and
timestamp. Binary outputs get the same block in a ``.meta`` sidecar file.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .cbsr import densify, maxk_forward
from .datasets import load_features, load_labels, random_splits, sbm_dataset
from .errors import DivergenceError, MaxkError, ParameterError
from .gnn import TrainConfig, approx_demo, build_gnn, train_full_batch
from .graph import CsrGraph, add_self_loops, from_coo, identity, load_graph, normalize
from .kernels import ExecMode, TrafficCounter, dense_spmm, spgemm_forward, sspmm_backward
from .partition import DEFAULT_W, build_plan, plan_stats, save_plan
from .traffic import (
    CACHE_CAVEAT,
    GRAPH_STATS,
    TrafficParams,
    measured_traffic,
    predict,
    reddit_consistency,
    reports_table,
    reports_to_csv,
    reports_to_json,
)

K_SWEEP = (2, 4, 8, 16, 32, 64, 96, 128, 192)
TIMING_NOTE = "CPU wall-clock timings; not comparable to GPU kernel latencies"
DEFAULT_MEMORY_LIMIT = 2 << 30


# -- configuration ----------------------------------------------------------------


def read_config_file(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _metadata(args: argparse.Namespace, extra: dict | None = None) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    meta = {
        "tool": f"maxkgnn {__version__}",
        "command": args.command,
        "config": json.dumps(config, default=str, sort_keys=True),
        "seed": args.seed,
        "threads": args.threads,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    meta.update(extra or {})
    return meta


def _meta_lines(meta: dict) -> str:
    return "".join(f"# {k}: {v}\n" for k, v in meta.items())


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _int_list(text: str) -> list[int]:
    return [int(t) for t in str(text).replace(",", " ").split()]


# -- inputs -----------------------------------------------------------------------


def _graph_from_args(args) -> CsrGraph:
    if args.graph:
        return load_graph(args.graph)
    if getattr(args, "identity", None):
        return identity(args.identity)
    n = getattr(args, "random_nodes", None)
    if n:
        rng = np.random.default_rng(args.seed)
        mask = rng.random((n, n)) < args.density
        r, c = np.nonzero(mask)
        return from_coo(n, r, c, rng.uniform(0.1, 1.0, r.size))
    raise ParameterError("no graph given (use --graph, --identity or --random-nodes)")


# -- subcommands ------------------------------------------------------------------


def cmd_partition(args) -> int:
    g = _graph_from_args(args)
    plan = build_plan(g, args.dim_k, args.w)
    stats = plan_stats(plan)
    meta = _metadata(args, {"num_nodes": g.num_nodes, "nnz": g.num_edges})
    if args.out:
        save_plan(plan, args.out)
        Path(str(args.out) + ".meta").write_text(_meta_lines(meta), encoding="utf-8")
    lines = [f"{k}: {v}" for k, v in stats.as_dict().items()]
    lines.insert(0, f"groups_per_warp: {plan.groups_per_warp}")
    print("\n".join(lines))
    return 0


def _time(fn, repeat: int):
    times = []
    result = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return result, float(np.mean(times)), float(np.min(times))


def cmd_bench(args) -> int:
    g = _graph_from_args(args)
    d = args.dim_origin
    need = g.num_nodes * d * 4 * 4 + g.num_edges * d * 4
    if need > args.memory_limit:
        raise ParameterError(f"estimated {need} bytes exceeds --memory-limit {args.memory_limit}")
    ks = _int_list(args.k_sweep) if args.k_sweep else ([args.dim_k] if args.dim_k else list(K_SWEEP))
    ks = [k for k in ks if 1 <= k <= d]
    if not ks:
        raise ParameterError(f"no k value in [1, {d}]")
    mode = ExecMode.parse(args.mode)
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((g.num_nodes, d)).astype(np.float32)
    dx = rng.standard_normal((g.num_nodes, d)).astype(np.float32)
    is_identity = g.num_edges == g.num_nodes and np.array_equal(g.col_idx, np.arange(g.num_nodes)) and np.all(
        g.edge_val == 1
    )

    dense_plan = build_plan(g, d, args.w)
    spmm_counter = TrafficCounter()
    dense_spmm(g, x, plan=dense_plan, counter=spmm_counter)
    _, spmm_mean, spmm_min = _time(lambda: dense_spmm(g, x), args.repeat)
    base = TrafficParams(g.num_nodes, g.num_edges, d, d, 0, args.w)
    spmm_model = predict("spmm", base, group_count=len(dense_plan))
    rows = [
        [
            "spmm", d, 0, spmm_mean, spmm_min, 1.0, spmm_counter.read_bytes, spmm_counter.write_bytes,
            spmm_counter.atomic_ops, spmm_model.read_bytes, spmm_model.write_bytes, spmm_model.atomic_ops,
            spmm_counter.read_bytes == spmm_model.read_bytes, 0.0, "",
        ]
    ]
    all_match = True
    for k in ks:
        xs, _ = maxk_forward(x, k, args.index_bytes or "auto")
        ib = xs.index_width
        plan = build_plan(g, k, args.w)
        params = TrafficParams(g.num_nodes, g.num_edges, d, k, ib, args.w)
        runs = {
            "spgemm": lambda: spgemm_forward(g, xs, plan, mode, threads=args.threads),
            "sspmm": lambda: sspmm_backward(g, dx, xs, plan, mode, threads=args.threads),
        }
        for kernel, fn in runs.items():
            counter = TrafficCounter()
            out = (
                spgemm_forward(g, xs, plan, mode, threads=args.threads, counter=counter)
                if kernel == "spgemm"
                else sspmm_backward(g, dx, xs, plan, mode, threads=args.threads, counter=counter)
            )
            _, mean, best = _time(fn, args.repeat)
            meas = measured_traffic(kernel, counter, params)
            model = predict(kernel, params, group_count=len(plan) if kernel == "spgemm" else None)
            match = (
                meas.read_bytes == model.read_bytes
                and meas.write_bytes == model.write_bytes
                and meas.atomic_ops == model.atomic_ops
            )
            all_match &= match
            sanity = ""
            if is_identity and kernel == "spgemm":
                sanity = "identity_ok" if np.array_equal(out, densify(xs)) else "identity_FAILED"
                all_match &= sanity == "identity_ok"
            rows.append(
                [
                    kernel, d, k, mean, best, spmm_mean / mean if mean else math.inf,
                    meas.read_bytes, meas.write_bytes, meas.atomic_ops, model.read_bytes, model.write_bytes,
                    model.atomic_ops, match, model.reduction_vs_spmm_pct, sanity,
                ]
            )
    header = [
        "kernel", "dim_origin", "dim_k", "mean_s", "min_s", "speedup_vs_spmm", "measured_read_bytes",
        "measured_write_bytes", "measured_atomic_ops", "model_read_bytes", "model_write_bytes",
        "model_atomic_ops", "traffic_match", "model_reduction_pct", "sanity",
    ]
    meta = _metadata(args, {"num_nodes": g.num_nodes, "nnz": g.num_edges, "note": TIMING_NOTE})
    _emit(_meta_lines(meta) + _csv(header, rows), args.out)
    return 0 if all_match else 1


def cmd_traffic(args) -> int:
    if args.dataset:
        if args.dataset not in GRAPH_STATS:
            raise ParameterError(f"unknown dataset {args.dataset!r}; known: {', '.join(GRAPH_STATS)}")
        n, nnz = GRAPH_STATS[args.dataset]
    elif args.graph:
        g = load_graph(args.graph)
        n, nnz = g.num_nodes, g.num_edges
    elif args.nodes and args.nnz:
        n, nnz = args.nodes, args.nnz
    else:
        raise ParameterError("give --dataset, --graph, or --nodes with --nnz")
    k = args.dim_k or args.dim_origin
    params = TrafficParams(n, nnz, args.dim_origin, k, args.index_bytes, args.w)
    reports = [predict(kernel, params) for kernel in ("spmm", "spgemm", "sspmm")]
    meta = _metadata(
        args,
        {
            "num_nodes": n,
            "nnz": nnz,
            "caveat": CACHE_CAVEAT,
            "index_note": "the 5*dim_k*nnz byte form assumes 1-byte indices; 2-byte indices give 6*dim_k*nnz",
        },
    )
    if args.format == "json":
        text = reports_to_json(reports, meta) + "\n"
    elif args.format == "table":
        text = _meta_lines(meta) + reports_table(reports) + "\n"
        if args.dataset == "Reddit":
            text += "\nReddit model vs. profiled traffic (GB):\n"
            for row in reddit_consistency(args.dim_origin, k, args.index_bytes):
                text += f"  {row['kernel']:<7} model {row['model_gb']:8.3f}  profiled {row['profiled_gb']:8.2f}  ratio {row['ratio']:.3f}\n"
            text += f"  caveat: {CACHE_CAVEAT}\n"
    else:
        text = reports_to_csv(reports, meta)
    _emit(text, args.out)
    return 0


def _train_inputs(args):
    if args.graph:
        g = load_graph(args.graph)
        if not (args.features and args.labels):
            raise ParameterError("--graph training needs --features and --labels")
        x = load_features(args.features)
        y = load_labels(args.labels)
        train_mask, val_mask = random_splits(g.num_nodes, args.train_frac, args.val_frac, args.seed)
    else:
        ds = sbm_dataset(args.nodes or 1000, args.blocks, args.p_in, args.p_out, args.feature_dim, args.signal, args.seed)
        g, x, y, train_mask, val_mask = ds.graph, ds.features, ds.labels, ds.train_mask, ds.val_mask
    return g, x, y, train_mask, val_mask


def cmd_train(args) -> int:
    g, x, y, train_mask, val_mask = _train_inputs(args)
    if args.self_loops:
        g = add_self_loops(g)
    g = normalize(g, args.normalization)
    out_dim = int(y.max()) + 1 if y.ndim == 1 else y.shape[1]
    model = build_gnn(
        x.shape[1],
        args.hidden,
        out_dim,
        num_layers=args.layers,
        k=args.dim_k or args.hidden,
        nonlinearity=args.nonlinearity,
        seed=args.seed,
        w=args.w,
        mode=args.mode,
        threads=args.threads,
    )
    config = TrainConfig(
        epochs=args.epochs, lr=args.lr, momentum=args.momentum, seed=args.seed, loss=args.loss
    )
    log = train_full_batch(model, g, x, y, config, train_mask, val_mask)
    log.metadata = _metadata(args)
    if args.no_timing:
        log.metadata.pop("timestamp")
    _emit(log.to_csv(include_timing=not args.no_timing), args.out)
    return 0


def cmd_approx(args) -> int:
    rs = _int_list(args.hidden_units)
    table = approx_demo(
        args.target, rs, epochs=args.epochs, lr=args.lr, seed=args.seed, nonlinearity=args.nonlinearity
    )
    mses = [m for _, m in table]
    inversions = sum(1 for a, b in zip(mses, mses[1:]) if b > a)
    meta = _metadata(args, {"k_rule": "ceil(r/4)", "inversions": inversions})
    _emit(_meta_lines(meta) + _csv(("r", "k", "mse"), [(r, math.ceil(r / 4), repr(m)) for r, m in table]), args.out)
    return 0


# -- parser -------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--graph", help="Matrix Market or MXKG binary graph")
    p.add_argument("--dim-origin", type=int, default=256)
    p.add_argument("--dim-k", type=int, default=None)
    p.add_argument("--index-bytes", type=int, default=1, choices=(0, 1, 2, 4))
    p.add_argument("--w", type=int, default=DEFAULT_W, help="max edges per edge group")
    p.add_argument("--mode", default="det", choices=("det", "par", "deterministic", "parallel"))
    p.add_argument("--threads", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--out", help="output path (stdout when omitted)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maxkgnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="build and dump the edge-group plan")
    _common(p)
    p.add_argument("--identity", type=int, help="use an N-node identity graph")
    p.set_defaults(func=cmd_partition, dim_k=32)

    p = sub.add_parser("bench", help="time kernels and count their traffic")
    _common(p)
    p.add_argument("--identity", type=int, help="use an N-node identity graph")
    p.add_argument("--random-nodes", type=int, help="use a random N-node graph")
    p.add_argument("--density", type=float, default=0.05)
    p.add_argument("--k-sweep", help="comma-separated k values")
    p.add_argument("--memory-limit", type=int, default=DEFAULT_MEMORY_LIMIT)
    p.set_defaults(func=cmd_bench, index_bytes=0)

    p = sub.add_parser("traffic", help="analytical traffic report")
    _common(p)
    p.add_argument("--dataset", help=f"graph preset: {', '.join(GRAPH_STATS)}")
    p.add_argument("--nodes", type=int)
    p.add_argument("--nnz", type=int)
    p.add_argument("--format", choices=("csv", "json", "table"), default="table")
    p.set_defaults(func=cmd_traffic)

    p = sub.add_parser("train", help="full-batch GNN training")
    _common(p)
    p.add_argument("--features")
    p.add_argument("--labels")
    p.add_argument("--nodes", type=int, default=1000, help="synthetic SBM size")
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--p-in", type=float, default=0.05)
    p.add_argument("--p-out", type=float, default=0.005)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--signal", type=float, default=0.5)
    p.add_argument("--train-frac", type=float, default=0.6)
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--nonlinearity", choices=("maxk", "relu", "none"), default="maxk")
    p.add_argument("--normalization", choices=("none", "mean", "symmetric"), default="symmetric")
    p.add_argument("--no-self-loops", dest="self_loops", action="store_false")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--loss", choices=("softmax-ce", "bce"), default="softmax-ce")
    p.add_argument("--no-timing", action="store_true", help="zero the timing column for byte-stable logs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("approx", help="function-approximation demo")
    _common(p)
    p.add_argument("--target", choices=("square", "zero"), default="square")
    p.add_argument("--hidden-units", default="4,16,64,256")
    p.add_argument("--nonlinearity", choices=("maxk", "relu"), default="maxk")
    p.add_argument("--epochs", type=int, default=3000)
    p.add_argument("--lr", type=float, default=1e-2)
    p.set_defaults(func=cmd_approx)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        file_values = read_config_file(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in file_values.items():
            action = known.get(key)
            if action is None:
                raise ParameterError(f"{args.config}: unknown option {key!r}")
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                defaults[key] = action.type(raw) if action.type else raw
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        return args.func(args)
    except DivergenceError as exc:
        print(f"maxkgnn: training diverged: {exc}", file=sys.stderr)
        return 3
    except (MaxkError, OSError) as exc:
        print(f"maxkgnn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
