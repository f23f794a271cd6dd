"""Full-catalog top-K evaluation: Recall@K and NDCG@K."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .graph import InteractionGraph


@dataclass
class MetricsReport:
    recall: dict = field(default_factory=dict)
    ndcg: dict = field(default_factory=dict)
    n_users_evaluated: int = 0
    row_diff: float | None = None
    distance_curve: list | None = None

    @property
    def defined(self) -> bool:
        return self.n_users_evaluated > 0

    def as_dict(self) -> dict:
        out = {"n_users_evaluated": self.n_users_evaluated, "defined": self.defined}
        for k in sorted(self.recall):
            out[f"recall@{k}"] = self.recall[k]
            out[f"ndcg@{k}"] = self.ndcg[k]
        if self.row_diff is not None:
            out["row_diff"] = self.row_diff
        if self.distance_curve is not None:
            out["distance_curve"] = [list(p) for p in self.distance_curve]
        return out

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2)

    def to_csv(self, path) -> None:
        d = {k: v for k, v in self.as_dict().items() if k != "distance_curve"}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(d))
            w.writerow(list(d.values()))


def _top_k(scores: np.ndarray, K: int) -> np.ndarray:
    """Row-wise top-K by score descending, ties by ascending column."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :K]


def rank_items(readout: np.ndarray, u: int, train_mask, K: int, num_users: int) -> np.ndarray:
    """Top-K items for user ``u``, excluding the items in ``train_mask``.

    ``train_mask`` is either a boolean vector over items or an index array.
    """
    items = readout[num_users:]
    scores = (items @ readout[u]).astype(np.float64)
    mask = np.asarray(train_mask)
    if mask.dtype == bool:
        scores[mask] = -np.inf
    elif mask.size:
        scores[mask] = -np.inf
    n_avail = int(np.isfinite(scores).sum())
    if K > n_avail:
        raise ValueError(f"K={K} exceeds the {n_avail} unmasked items")
    return _top_k(scores[None, :], K)[0]


def recall_at_k(topk, test_items) -> float:
    test = set(np.asarray(test_items).tolist())
    if not test:
        raise ValueError("empty test set")
    return len(test.intersection(np.asarray(topk).tolist())) / len(test)


def ndcg_at_k(topk, test_items, K: int) -> float:
    test = set(np.asarray(test_items).tolist())
    if not test:
        raise ValueError("empty test set")
    topk = np.asarray(topk)[:K].tolist()
    dcg = sum(1.0 / math.log2(r + 2) for r, it in enumerate(topk) if it in test)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(K, len(test))))
    return dcg / idcg


def evaluate(readout: np.ndarray, train: InteractionGraph, test: InteractionGraph,
             Ks=(20,), user_batch: int = 1024) -> MetricsReport:
    """Mean Recall@K / NDCG@K over users with at least one test item."""
    Ks = sorted(set(int(k) for k in Ks))
    nu = train.num_users
    users = np.flatnonzero(test.user_degree > 0)
    report = MetricsReport(n_users_evaluated=int(users.size))
    if users.size == 0:
        report.recall = {k: float("nan") for k in Ks}
        report.ndcg = {k: float("nan") for k in Ks}
        return report
    Kmax = max(Ks)
    items = readout[nu:].astype(np.float64)
    discount = 1.0 / np.log2(np.arange(2, Kmax + 2))
    ideal = np.cumsum(discount)
    rec = {k: 0.0 for k in Ks}
    ndc = {k: 0.0 for k in Ks}
    for start in range(0, users.size, user_batch):
        ub = users[start:start + user_batch]
        scores = readout[ub].astype(np.float64) @ items.T
        tu, ti = _rows_of(train, ub)
        scores[tu, ti] = -np.inf
        top = _top_k(scores, Kmax)
        hu, hi = _rows_of(test, ub)
        truth = np.zeros_like(scores, dtype=bool)
        truth[hu, hi] = True
        hits = np.take_along_axis(truth, top, axis=1)
        if hits.shape[1] < Kmax:
            # catalog smaller than K: missing ranks hold no item
            hits = np.pad(hits, ((0, 0), (0, Kmax - hits.shape[1])))
        n_test = test.user_degree[ub]
        for k in Ks:
            h = hits[:, :k]
            rec[k] += float(np.sum(h.sum(axis=1) / n_test))
            dcg = h @ discount[:k]
            ndc[k] += float(np.sum(dcg / ideal[np.minimum(n_test, k) - 1]))
    report.recall = {k: rec[k] / users.size for k in Ks}
    report.ndcg = {k: ndc[k] / users.size for k in Ks}
    return report


def _rows_of(graph: InteractionGraph, users: np.ndarray):
    """(local row, item) coordinates of the listed users' interactions."""
    starts, stops = graph.user_indptr[users], graph.user_indptr[users + 1]
    lens = stops - starts
    local = np.repeat(np.arange(users.size), lens)
    offs = np.arange(local.size) - np.repeat(np.cumsum(lens) - lens, lens)
    return local, graph.user_indices[starts[local] + offs]
