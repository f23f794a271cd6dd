"""Ranking losses on readout embeddings and the co-occurrence neighbor index.

Both BPR and LEC are sums of ``f(e_a . e_b)`` terms, so their gradients are
``(W + W^T) @ readout`` for a sparse coefficient matrix ``W``; gradients are
returned as :class:`RowGrad` objects holding only the touched rows.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, log_expit

from .graph import InteractionGraph

log = logging.getLogger(__name__)

CANDIDATE_CAP = 200_000


@dataclass
class RowGrad:
    """Gradient restricted to a sorted set of rows."""

    rows: np.ndarray
    values: np.ndarray

    @classmethod
    def empty(cls, T: int, dtype=np.float64) -> "RowGrad":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, T), dtype=dtype))

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "RowGrad":
        rows = np.flatnonzero(np.any(dense != 0, axis=1))
        return cls(rows, dense[rows])

    def to_dense(self, n: int) -> np.ndarray:
        out = np.zeros((n, self.values.shape[1]), dtype=self.values.dtype)
        out[self.rows] = self.values
        return out

    def add_to(self, dense: np.ndarray, scale: float = 1.0) -> np.ndarray:
        if scale == 1.0:
            dense[self.rows] += self.values
        elif scale != 0.0:
            dense[self.rows] += dense.dtype.type(scale) * self.values
        return dense

    def __len__(self):
        return int(self.rows.size)


def log_sigmoid(x):
    """Stable ``log(sigmoid(x))``."""
    return log_expit(x)


def _bilinear_grad(a, b, coef, readout) -> RowGrad:
    """Gradient of ``sum_t f_t(e_{a_t} . e_{b_t})`` where ``coef_t = f_t'``."""
    n, T = readout.shape
    if a.size == 0:
        return RowGrad.empty(T, readout.dtype)
    rows = np.concatenate([a, b])
    cols = np.concatenate([b, a])
    W = sp.csr_matrix((np.concatenate([coef, coef]).astype(readout.dtype), (rows, cols)), shape=(n, n))
    touched = np.unique(rows)
    sub = W[touched]
    return RowGrad(touched, np.asarray(sub @ readout))


def _dots(readout, a, b):
    return np.einsum("ij,ij->i", readout[a], readout[b])


# ---------------------------------------------------------------------------
# BPR

@dataclass
class BatchTriples:
    """(user, positive item, negative item) triples; items are item-space indices."""

    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self):
        return int(self.users.size)

    def validate(self, graph: InteractionGraph) -> None:
        if not np.all(graph.has_edges(self.users, self.pos)):
            raise ValueError("triple with a positive item the user never interacted with")
        if np.any(graph.has_edges(self.users, self.neg)):
            raise ValueError("triple with a negative item the user interacted with")

    def rows(self, num_users: int) -> np.ndarray:
        """Distinct embedding rows referenced by the batch."""
        return np.unique(np.concatenate([self.users, self.pos + num_users, self.neg + num_users]))


def bpr_loss(triples: BatchTriples, readout: np.ndarray, num_users: int,
             graph: InteractionGraph | None = None) -> tuple[float, RowGrad]:
    """Summed ``-log sigmoid(y_ui - y_uj)`` over the batch and its gradient.

    Passing ``graph`` enables the (slow) check that every triple is valid.
    """
    if graph is not None:
        triples.validate(graph)
    u = np.asarray(triples.users, dtype=np.int64)
    i = np.asarray(triples.pos, dtype=np.int64) + num_users
    j = np.asarray(triples.neg, dtype=np.int64) + num_users
    x = _dots(readout, u, i) - _dots(readout, u, j)
    loss = float(-np.sum(log_sigmoid(x.astype(np.float64))))
    s = expit(-x)
    return loss, _bilinear_grad(np.concatenate([u, u]), np.concatenate([i, j]),
                                np.concatenate([-s, s]), readout)


# ---------------------------------------------------------------------------
# LEC index

@dataclass(eq=False)
class LecIndex:
    """Per-item similar and marginal co-occurrence neighbors in CSR layout."""

    K1: int
    K2: int
    theta: int
    num_items: int
    sim_ptr: np.ndarray
    sim_items: np.ndarray
    sim_counts: np.ndarray
    mar_ptr: np.ndarray
    mar_items: np.ndarray
    mar_counts: np.ndarray

    def similar(self, i: int) -> np.ndarray:
        return self.sim_items[self.sim_ptr[i]:self.sim_ptr[i + 1]]

    def marginal(self, i: int) -> np.ndarray:
        return self.mar_items[self.mar_ptr[i]:self.mar_ptr[i + 1]]

    def similar_counts(self, i: int) -> np.ndarray:
        return self.sim_counts[self.sim_ptr[i]:self.sim_ptr[i + 1]]

    def marginal_counts(self, i: int) -> np.ndarray:
        return self.mar_counts[self.mar_ptr[i]:self.mar_ptr[i + 1]]

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in
                ("sim_ptr", "sim_items", "sim_counts", "mar_ptr", "mar_items", "mar_counts")}

    def __eq__(self, other):
        if not isinstance(other, LecIndex):
            return NotImplemented
        head = (self.K1, self.K2, self.theta, self.num_items)
        if head != (other.K1, other.K2, other.theta, other.num_items):
            return False
        return all(np.array_equal(v, getattr(other, k)) for k, v in self.arrays().items())


def _select(cols: np.ndarray, counts: np.ndarray, K1: int, K2: int):
    order = np.lexsort((cols, -counts))
    cols, counts = cols[order], counts[order]
    s_cols, s_cnt = cols[:K1], counts[:K1]
    rest_c, rest_n = cols[K1:], counts[K1:]
    k2 = min(K2, rest_c.size)
    return s_cols, s_cnt, rest_c[rest_c.size - k2:], rest_n[rest_n.size - k2:]


def build_lec_index(train: InteractionGraph, K1: int = 30, K2: int = 50, theta: int = 50,
                    block: int = 1024, exact: bool = True,
                    max_candidates: int = CANDIDATE_CAP) -> LecIndex:
    """Mine similar (highest co-occurrence) and marginal (lowest surviving) items.

    Second-order item neighbors with co-occurrence ``<= theta`` are dropped;
    survivors are sorted by count descending (ties by item index), the first
    ``K1`` become the similar set and the last ``K2`` of the remainder the
    marginal set. Co-occurrence counts come from ``R^T R`` computed in item
    blocks.

    With ``exact=False``, items whose candidate enumeration (sum of their
    users' degrees) exceeds ``max_candidates`` only count co-occurrence over
    their first users up to that budget, and a warning is emitted.
    """
    if min(K1, K2, theta) < 0:
        raise ValueError("K1, K2 and theta must be >= 0")
    R = train.interaction_matrix().astype(np.int64).tocsc()
    Rt = R.T.tocsr()
    ni = train.num_items
    if not exact:
        Rt = _cap_candidates(train, Rt, max_candidates)
    sims, marg = [], []
    for start in range(0, ni, block):
        stop = min(start + block, ni)
        C = (Rt[start:stop] @ R).tocsr()
        C.sort_indices()
        for r in range(stop - start):
            i = start + r
            lo, hi = C.indptr[r], C.indptr[r + 1]
            cols, cnt = C.indices[lo:hi], C.data[lo:hi]
            keep = (cnt > theta) & (cols != i)
            sims_i = _select(cols[keep].astype(np.int64), cnt[keep].astype(np.int64), K1, K2)
            sims.append(sims_i[:2])
            marg.append(sims_i[2:])
    return LecIndex(K1, K2, theta, ni, *_pack(sims), *_pack(marg))


def _cap_candidates(train, Rt, cap):
    deg = train.user_degree
    rows, cols = [], []
    capped = 0
    for i in range(train.num_items):
        users = train.users_of(i)
        budget = np.cumsum(deg[users])
        if budget.size and budget[-1] > cap:
            users = users[budget <= cap]
            capped += 1
        rows.append(np.full(users.size, i))
        cols.append(users)
    if capped:
        warnings.warn(f"{capped} items exceeded {cap} candidate encounters; "
                      "their co-occurrence counts are truncated", RuntimeWarning, stacklevel=3)
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    return sp.csr_matrix((np.ones(rows.size, dtype=np.int64), (rows, cols)), shape=Rt.shape)


def _pack(parts):
    lens = np.array([p[0].size for p in parts], dtype=np.int64)
    ptr = np.zeros(lens.size + 1, dtype=np.int64)
    np.cumsum(lens, out=ptr[1:])
    items = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, np.int64)
    counts = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, np.int64)
    return ptr, items.astype(np.int64), counts.astype(np.int64)


LEC_MAGIC = b"DGRLEC1\n"


def save_lec_index(index: LecIndex, path, binary: bool = False) -> None:
    """Write the index as text (``i | s:c ... | m:c ...`` per item) or binary."""
    if binary:
        with open(path, "wb") as fh:
            fh.write(LEC_MAGIC)
            for k in ("K1", "K2", "theta", "num_items"):
                fh.write(f"{k}={getattr(index, k)}\n".encode())
            for k, v in index.arrays().items():
                fh.write(f"{k}={v.size}\n".encode())
            fh.write(b"\n")
            for v in index.arrays().values():
                fh.write(v.astype("<i8").tobytes())
        return
    with open(path, "w") as fh:
        fh.write(f"{index.K1} {index.K2} {index.theta} {index.num_items}\n")
        for i in range(index.num_items):
            s = " ".join(f"{j}:{c}" for j, c in zip(index.similar(i), index.similar_counts(i)))
            m = " ".join(f"{j}:{c}" for j, c in zip(index.marginal(i), index.marginal_counts(i)))
            fh.write(f"{i} | {s} | {m}\n")


def load_lec_index(path) -> LecIndex:
    with open(path, "rb") as fh:
        head = fh.read(len(LEC_MAGIC))
        if head == LEC_MAGIC:
            meta = {}
            for line in iter(fh.readline, b"\n"):
                if not line:
                    raise ValueError(f"{path}: truncated header")
                k, v = line.decode().strip().split("=", 1)
                meta[k] = int(v)
            arrays = {}
            for k in ("sim_ptr", "sim_items", "sim_counts", "mar_ptr", "mar_items", "mar_counts"):
                raw = fh.read(8 * meta[k])
                if len(raw) != 8 * meta[k]:
                    raise ValueError(f"{path}: truncated array {k}")
                arrays[k] = np.frombuffer(raw, dtype="<i8").astype(np.int64)
            return LecIndex(meta["K1"], meta["K2"], meta["theta"], meta["num_items"], **arrays)
    with open(path) as fh:
        K1, K2, theta, ni = (int(x) for x in fh.readline().split())
        sims, marg = [], []
        for _ in range(ni):
            _, s, m = fh.readline().split("|")
            for field, out in ((s, sims), (m, marg)):
                pairs = [tok.split(":") for tok in field.split()]
                out.append((np.array([int(a) for a, _ in pairs], dtype=np.int64),
                            np.array([int(b) for _, b in pairs], dtype=np.int64)))
    return LecIndex(K1, K2, theta, ni, *_pack(sims), *_pack(marg))


# ---------------------------------------------------------------------------
# LEC loss

def _ragged(ptr, keys):
    """Flattened positions of ``ptr``-slices for each key, plus owner ids."""
    starts = ptr[keys]
    lens = ptr[keys + 1] - starts
    owner = np.repeat(np.arange(keys.size), lens)
    offs = np.arange(owner.size) - np.repeat(np.cumsum(lens) - lens, lens)
    return owner, starts[owner] + offs, lens


def lec_loss(users, items, readout: np.ndarray, index: LecIndex, graph: InteractionGraph,
             normalize_pairs: bool = False) -> tuple[float, RowGrad]:
    """Local correction loss over positive pairs ``(users[t], items[t])``.

    The double sum over similar x marginal neighbors is kept literal, so each
    similar term carries weight ``|M(i)|`` and each marginal term ``|S(i)|``;
    ``normalize_pairs`` divides every pair's contribution by ``|S(i)| |M(i)|``.
    Degrees in the weights come from ``graph``.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    T = readout.shape[1]
    nu = graph.num_users
    ns = index.sim_ptr[items + 1] - index.sim_ptr[items]
    nm = index.mar_ptr[items + 1] - index.mar_ptr[items]
    ok = (ns > 0) & (nm > 0)
    users, items, ns, nm = users[ok], items[ok], ns[ok], nm[ok]
    if users.size == 0:
        return 0.0, RowGrad.empty(T, readout.dtype)
    du = graph.user_degree[users] + 1.0
    di = graph.item_degree + 1.0
    pair_w = 1.0 / (ns * nm) if normalize_pairs else np.ones(users.size)

    so, spos, _ = _ragged(index.sim_ptr, items)
    s_items = index.sim_items[spos]
    s_w = nm[so] * pair_w[so] / np.sqrt(du[so] * di[s_items])
    mo, mpos, _ = _ragged(index.mar_ptr, items)
    m_items = index.mar_items[mpos]
    m_w = ns[mo] * pair_w[mo] / np.sqrt(du[mo] * di[m_items])

    a = np.concatenate([users[so], users[mo]])
    b = np.concatenate([s_items, m_items]) + nu
    x = _dots(readout, a, b).astype(np.float64)
    xs, xm = x[:so.size], x[so.size:]
    loss = float(-np.sum(s_w * log_sigmoid(xs)) + np.sum(m_w * log_sigmoid(xm)))
    coef = np.concatenate([-s_w * expit(-xs), m_w * expit(-xm)])
    return loss, _bilinear_grad(a, b, coef, readout)


def total_loss(cf: float, lec: float, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return cf + lam * lec


def l2_regularizer(E0: np.ndarray, rows_touched, coeff: float = 1e-4) -> tuple[float, RowGrad]:
    """``coeff/2 * sum ||E0_r||^2`` over the distinct touched rows."""
    rows = np.unique(np.asarray(list(rows_touched) if isinstance(rows_touched, (set, frozenset))
                                else rows_touched, dtype=np.int64))
    if coeff == 0 or rows.size == 0:
        return 0.0, RowGrad.empty(E0.shape[1], E0.dtype)
    sub = E0[rows]
    loss = 0.5 * coeff * float(np.sum(sub.astype(np.float64) ** 2))
    return loss, RowGrad(rows, E0.dtype.type(coeff) * sub)
