"""Command-line entry point: ``dgr {prepare,train,evaluate,analyze,sweep}``.

Exit codes: 1 usage, 2 data, 3 numeric.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from .engine import forward
from .graph import DataError, load_interactions, load_split, save_interactions, split_train_test
from .losses import build_lec_index, load_lec_index, save_lec_index
from .metrics import evaluate, rank_items
from .oversmooth import compute_oversmoothing_state, distance_curve, row_diff
from .trainer import CheckpointError, NonFiniteLossError, checkpoint_load, fit

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

log = logging.getLogger("dgr")


class UsageError(Exception):
    pass


def _threads():
    try:
        return max(int(os.environ.get("DGR_THREADS", "1")), 1)
    except ValueError:
        raise UsageError("DGR_THREADS must be an integer") from None


def _load_config(args) -> cfgmod.RunConfig:
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"{args.config}: config file not found")
        cfg = cfgmod.load(args.config)
    else:
        cfg = cfgmod.RunConfig()
    return cfgmod.apply_overrides(cfg, args.set)


def _load_graphs(cfg: cfgmod.RunConfig):
    fmt = cfg.get("format", "adjacency-list")
    if cfg.get("train") and cfg.get("test"):
        return load_split(cfg.get("train"), cfg.get("test"), fmt)
    if cfg.get("data"):
        graph = load_interactions(cfg.get("data"), fmt)
        return split_train_test(graph, cfg.split_ratio, cfg.split_seed)
    if cfg.get("train"):
        raise DataError("config sets 'train' without 'test'")
    raise DataError("config needs either 'data' or 'train' and 'test'")


def _outputs(out, names, force):
    paths = [os.path.join(out, n) for n in names]
    existing = [p for p in paths if os.path.exists(p)]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {', '.join(existing)} (use --force)")
    os.makedirs(out, exist_ok=True)
    return paths


def _index_for(cfg: cfgmod.RunConfig, train):
    tc = cfg.train
    if not tc.lec_enabled:
        return None
    path = cfg.get("index")
    if path and os.path.exists(path):
        index = load_lec_index(path)
        if (index.K1, index.K2, index.theta, index.num_items) == (tc.K1, tc.K2, tc.theta, train.num_items):
            return index
        log.warning("index %s does not match K1/K2/theta; rebuilding", path)
    return build_lec_index(train, tc.K1, tc.K2, tc.theta)


def cmd_prepare(args) -> int:
    cfg = _load_config(args)
    train_p, test_p, index_p, report_p, conf_p = _outputs(
        args.out, ["train.txt", "test.txt", "lec_index.txt", "load_report.txt", "prepared.conf"], args.force)
    train, test = _load_graphs(cfg)
    save_interactions(train, train_p)
    save_interactions(test, test_p)
    tc = cfg.train
    index = build_lec_index(train, tc.K1, tc.K2, tc.theta)
    save_lec_index(index, index_p, binary=args.binary)
    with open(report_p, "w") as fh:
        fh.write("[train]\n" + train.load_report() + "[test]\n" + test.load_report())
    prepared = cfg.copy()
    prepared.paths.update(train=os.path.abspath(train_p), test=os.path.abspath(test_p),
                          index=os.path.abspath(index_p), format="adjacency-list")
    prepared.paths.pop("data", None)
    prepared.save(conf_p)
    print(f"prepared {train.num_users} users, {train.num_items} items, "
          f"{train.num_edges} train / {test.num_edges} test edges -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    tc = cfg.train
    if args.no_gmp:
        tc.gmp_enabled = False
    if args.no_lec:
        tc.lec_enabled = False
    tc.validate()
    if args.resume is None:
        _outputs(args.out, ["history.csv", "best.ckpt"], args.force)
    train, test = _load_graphs(cfg)
    res = fit(tc, train, test, out_dir=args.out, index=_index_for(cfg, train), resume=args.resume)
    cfg.save(os.path.join(args.out, "run.conf"))
    if res.history:
        best = max(res.history, key=lambda r: r[f"recall@{tc.main_k}"])
        print(f"best epoch {res.best_epoch}: recall@{tc.main_k}={best[f'recall@{tc.main_k}']:.5f} "
              f"ndcg@{tc.main_k}={best[f'ndcg@{tc.main_k}']:.5f}")
    return 0


def _checkpoint(args, cfg, train):
    E0, ck = checkpoint_load(args.checkpoint, expect_shape=(train.num_nodes, cfg.train.T))
    # structural settings come from the checkpoint, overrides from --set still win
    for key in ("K", "alpha", "gmp_enabled", "propagation"):
        if not any(s.startswith(key + "=") for s in args.set or ()):
            cfg.train.set(key, getattr(ck, key))
    return E0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    train, test = _load_graphs(cfg)
    E0 = _checkpoint(args, cfg, train)
    tc = cfg.train
    readout = forward(E0.astype(np.float64), _adj(train), tc.K, tc.schedule, None, tc.propagation).readout
    report = evaluate(readout, train, test, tc.eval_ks)
    report.row_diff = row_diff(readout)
    os.makedirs(args.out, exist_ok=True)
    report.to_csv(os.path.join(args.out, "metrics.csv"))
    report.to_json(os.path.join(args.out, "metrics.json"))
    if args.dump_topk:
        with open(os.path.join(args.out, "topk.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user", "rank", "item"])
            for u in range(train.num_users):
                mask = train.items_of(u)
                k = min(args.dump_topk, train.num_items - mask.size)
                for r, i in enumerate(rank_items(readout, u, mask, k, train.num_users), start=1):
                    w.writerow([u, r, int(i)])
    print(" ".join(f"{k}={v:.5f}" if isinstance(v, float) else f"{k}={v}"
                   for k, v in report.as_dict().items() if k != "distance_curve"))
    return 0


def _adj(train):
    from .graph import build_normalized_adjacency

    return build_normalized_adjacency(train)


def cmd_analyze(args) -> int:
    cfg = _load_config(args)
    train, test = _load_graphs(cfg)
    tc = cfg.train
    adj = _adj(train)
    if args.random_init:
        rng = np.random.default_rng(tc.seed)
        E0 = rng.normal(0.0, tc.init_std, size=(train.num_nodes, tc.T))
    else:
        if not args.checkpoint:
            raise UsageError("analyze needs --checkpoint or --random-init")
        E0 = _checkpoint(args, cfg, train).astype(np.float64)
    os.makedirs(args.out, exist_ok=True)
    state = compute_oversmoothing_state(train, E0)
    curve = distance_curve(adj, E0, range(1, args.max_k + 1), state)
    with open(os.path.join(args.out, "curve.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "distance"])
        for k, d in curve:
            w.writerow([k, repr(d)])
    plain = forward(E0, adj, tc.K, None).readout
    gmp = forward(E0, adj, tc.K, tuple(tc.alpha), state).readout
    sampled = True if args.sampled else None
    rd_plain = row_diff(plain, sampled=sampled, return_stderr=True)
    rd_gmp = row_diff(gmp, sampled=sampled, return_stderr=True)
    with open(os.path.join(args.out, "row_diff.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["forward", "row_diff", "stderr", "estimate"])
        w.writerow(["plain", repr(rd_plain[0]), repr(rd_plain[1]), int(rd_plain[1] > 0)])
        w.writerow(["gmp", repr(rd_gmp[0]), repr(rd_gmp[1]), int(rd_gmp[1] > 0)])
    if args.nodes:
        nodes = [int(x) for x in args.nodes.split(",")]
        emb = forward(E0, adj, tc.K, tuple(tc.alpha), state)
        with open(os.path.join(args.out, "layers.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", "layer"] + [f"e{t}" for t in range(E0.shape[1])])
            for a in nodes:
                for k, L in enumerate(emb.layers):
                    w.writerow([a, k] + [repr(float(x)) for x in L[a]])
                w.writerow([a, "m"] + [repr(float(x)) for x in state.point(a)])
    print(f"row_diff plain={rd_plain[0]:.6f} gmp={rd_gmp[0]:.6f}; "
          f"D(k=1)={curve[0][1]:.6f} D(k={curve[-1][0]})={curve[-1][1]:.6f}")
    return 0


def cmd_sweep(args) -> int:
    from .sweep import best_result, parse_grid, run_sweep

    cfg = _load_config(args)
    tc = cfg.train.validate()
    try:
        points = parse_grid(args.grid or ["alpha"], tc.K)
    except ValueError as e:
        raise UsageError(str(e)) from None
    train, test = _load_graphs(cfg)
    os.makedirs(args.out, exist_ok=True)
    index = _index_for(cfg, train)
    workers = args.workers or _threads()
    rows = run_sweep(tc, points, train, test, os.path.join(args.out, "results.csv"), index, workers)
    best = best_result(rows)
    if best:
        print(f"{len(rows)} points; best {best['point']} recall@20={float(best['recall@20']):.5f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("prepare", help="split data and build the LEC index")
    common(sp)
    sp.add_argument("--binary", action="store_true", help="write the index in binary form")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--no-gmp", action="store_true")
    sp.add_argument("--no-lec", action="store_true")
    sp.add_argument("--resume", metavar="CKPT")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dump-topk", type=int, default=0, metavar="K")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("analyze", help="over-smoothing diagnostics")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--random-init", action="store_true")
    sp.add_argument("--max-k", type=int, default=20)
    sp.add_argument("--nodes", help="comma-separated node ids whose layer embeddings to dump")
    sp.add_argument("--sampled", action="store_true", help="Monte-Carlo row_diff")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("sweep", help="grid search")
    common(sp)
    sp.add_argument("--grid", action="append", metavar="SPEC",
                    help="alpha | alpha=v,... | alpha.L=v,... | lam=v,... | K1= | K2= | theta=")
    sp.add_argument("--workers", type=int, default=0)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except (UsageError, cfgmod.ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
