"""Hyper-parameter grids over alpha / lambda / K1 / K2 / theta with resumable results."""

from __future__ import annotations

import csv
import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

log = logging.getLogger(__name__)

ALPHA_GRID = tuple(round(0.1 * k, 1) for k in range(11))
SWEEPABLE = ("alpha", "lam", "K1", "K2", "theta")


def parse_grid(specs, K: int) -> list[dict]:
    """Expand ``--grid`` specs into a list of override dicts.

    ``alpha=v1,v2`` is a cartesian product over all K layers, ``alpha.2=...``
    varies a single layer (1-based), bare ``alpha`` uses 0.0..1.0 in steps of
    0.1. Other keys take explicit value lists. Specs combine as a product.
    """
    axes = []
    layer_axes = {}
    for spec in specs:
        name, _, values = spec.partition("=")
        name = name.strip()
        base = name.split(".")[0]
        if base not in SWEEPABLE:
            raise ValueError(f"cannot sweep {name!r}; choose from {SWEEPABLE}")
        if values.strip():
            vals = [float(v) for v in values.split(",") if v.strip()]
        elif base == "alpha":
            vals = list(ALPHA_GRID)
        else:
            raise ValueError(f"grid {name!r} needs values")
        if base == "alpha":
            if "." in name:
                layer = int(name.split(".")[1])
                if not 1 <= layer <= K:
                    raise ValueError(f"layer {layer} outside 1..{K}")
                layer_axes[layer - 1] = vals
            else:
                for k in range(K):
                    layer_axes[k] = vals
        else:
            cast = float if base == "lam" else int
            axes.append([(base, cast(v)) for v in vals])
    for k in sorted(layer_axes):
        axes.append([(f"alpha.{k}", v) for v in layer_axes[k]])
    return [dict(combo) for combo in itertools.product(*axes)]


def apply_point(train_config, point: dict):
    """Copy of ``train_config`` with the point's overrides applied."""
    from .trainer import TrainConfig

    cfg = TrainConfig.from_items(train_config.items())
    alpha = list(cfg.alpha)
    for k, v in point.items():
        if k.startswith("alpha."):
            alpha[int(k.split(".")[1])] = float(v)
        else:
            cfg.set(k, v)
    cfg.alpha = tuple(alpha)
    return cfg


def point_key(point: dict) -> str:
    return ";".join(f"{k}={point[k]!r}" for k in sorted(point))


def _run(args):
    train_config, point, train, test, index = args
    from .trainer import fit

    cfg = apply_point(train_config, point)
    res = fit(cfg, train, test, index=index if cfg.lec_enabled and _index_ok(index, cfg) else None)
    best = max(res.history, key=lambda r: r[f"recall@{cfg.main_k}"]) if res.history else {}
    return {"point": point_key(point), "alpha": ",".join(map(str, cfg.alpha)), "lam": cfg.lam,
            "K1": cfg.K1, "K2": cfg.K2, "theta": cfg.theta,
            "best_epoch": res.best_epoch, "recall@20": best.get("recall@20", float("nan")),
            "ndcg@20": best.get("ndcg@20", float("nan")),
            "row_diff": best.get("row_diff", float("nan"))}


def _index_ok(index, cfg) -> bool:
    return index is not None and (index.K1, index.K2, index.theta) == (cfg.K1, cfg.K2, cfg.theta)


COLUMNS = ["point", "alpha", "lam", "K1", "K2", "theta", "best_epoch", "recall@20", "ndcg@20", "row_diff"]


def read_results(path) -> list[dict]:
    if not os.path.exists(path):
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_sweep(train_config, points, train, test, results_path, index=None, workers: int = 1) -> list[dict]:
    """Run every grid point not already present in ``results_path``."""
    done = {r["point"] for r in read_results(results_path)}
    todo = [p for p in points if point_key(p) not in done]
    log.info("sweep: %d points, %d already done", len(points), len(points) - len(todo))
    fresh = not os.path.exists(results_path)
    with open(results_path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS)
        if fresh:
            w.writeheader()
        jobs = [(train_config, p, train, test, index) for p in todo]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(workers) as ex:
                for row in ex.map(_run, jobs):
                    w.writerow(row)
                    fh.flush()
        else:
            for job in jobs:
                w.writerow(_run(job))
                fh.flush()
    return read_results(results_path)


def best_result(rows: list[dict]) -> dict | None:
    rows = [r for r in rows if np.isfinite(float(r["recall@20"]))]
    return max(rows, key=lambda r: float(r["recall@20"])) if rows else None
