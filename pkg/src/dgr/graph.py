"""Bipartite interaction graph, dataset loading and the normalized adjacency.

Node indexing: users occupy rows ``[0, num_users)``, items occupy
``[num_users, num_users + num_items)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

FORMATS = ("adjacency-list", "pair-list")


class DataError(ValueError):
    """Malformed or unusable interaction data."""


@dataclass(frozen=True, eq=False)
class InteractionGraph:
    """Implicit-feedback user-item graph stored as two CSR views.

    ``user_indptr/user_indices`` list the items of each user and
    ``item_indptr/item_indices`` the users of each item; both are sorted.
    """

    num_users: int
    num_items: int
    user_indptr: np.ndarray
    user_indices: np.ndarray
    item_indptr: np.ndarray
    item_indices: np.ndarray
    user_ids: np.ndarray | None = field(default=None, repr=False)
    item_ids: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_pairs(cls, users, items, num_users: int, num_items: int,
                   user_ids=None, item_ids=None) -> "InteractionGraph":
        users = np.asarray(users, dtype=np.int64).ravel()
        items = np.asarray(items, dtype=np.int64).ravel()
        if users.shape != items.shape:
            raise ValueError("users and items must have the same length")
        if users.size and (users.min() < 0 or users.max() >= num_users):
            raise ValueError("user index out of range")
        if items.size and (items.min() < 0 or items.max() >= num_items):
            raise ValueError("item index out of range")
        keys = np.unique(users * num_items + items)
        u, i = np.divmod(keys, num_items)
        # keys are sorted by (user, item), so the user view is already CSR
        user_indptr = np.zeros(num_users + 1, dtype=np.int64)
        np.cumsum(np.bincount(u, minlength=num_users), out=user_indptr[1:])
        order = np.lexsort((u, i))
        item_indptr = np.zeros(num_items + 1, dtype=np.int64)
        np.cumsum(np.bincount(i, minlength=num_items), out=item_indptr[1:])
        return cls(num_users, num_items, user_indptr, i.astype(np.int64),
                   item_indptr, u[order].astype(np.int64), user_ids, item_ids)

    @property
    def num_edges(self) -> int:
        return int(self.user_indices.size)

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @cached_property
    def user_degree(self) -> np.ndarray:
        return np.diff(self.user_indptr)

    @cached_property
    def item_degree(self) -> np.ndarray:
        return np.diff(self.item_indptr)

    @cached_property
    def degrees(self) -> np.ndarray:
        """Degrees of all ``num_users + num_items`` nodes in global order."""
        return np.concatenate([self.user_degree, self.item_degree])

    def items_of(self, u: int) -> np.ndarray:
        return self.user_indices[self.user_indptr[u]:self.user_indptr[u + 1]]

    def users_of(self, i: int) -> np.ndarray:
        return self.item_indices[self.item_indptr[i]:self.item_indptr[i + 1]]

    @property
    def user_items(self) -> list[np.ndarray]:
        return [self.items_of(u) for u in range(self.num_users)]

    @property
    def item_users(self) -> list[np.ndarray]:
        return [self.users_of(i) for i in range(self.num_items)]

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """All (user, item) pairs, sorted by user then item."""
        return np.repeat(np.arange(self.num_users), self.user_degree), self.user_indices

    @cached_property
    def edge_keys(self) -> np.ndarray:
        """Sorted ``u * num_items + i`` codes, used for membership tests."""
        u, i = self.edges()
        return u * self.num_items + i

    def has_edges(self, users, items) -> np.ndarray:
        keys = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self.edge_keys, keys)
        pos = np.minimum(pos, max(self.edge_keys.size - 1, 0))
        if self.edge_keys.size == 0:
            return np.zeros(keys.shape, dtype=bool)
        return self.edge_keys[pos] == keys

    def interaction_matrix(self) -> sp.csr_matrix:
        data = np.ones(self.num_edges, dtype=np.float64)
        return sp.csr_matrix((data, self.user_indices, self.user_indptr),
                             shape=(self.num_users, self.num_items))

    @cached_property
    def num_components(self) -> int:
        """Connected components of the bipartite graph (isolated nodes count)."""
        r = self.interaction_matrix()
        a = sp.bmat([[None, r], [r.T, None]], format="csr")
        return int(connected_components(a, directed=False)[0])

    def load_report(self) -> str:
        deg = self.degrees
        lines = [
            f"users: {self.num_users}",
            f"items: {self.num_items}",
            f"edges: {self.num_edges}",
            f"density: {self.num_edges / max(self.num_users * self.num_items, 1):.6f}",
        ]
        for name, d in (("user", self.user_degree), ("item", self.item_degree), ("node", deg)):
            if d.size:
                lines.append(f"{name}_degree: min={d.min()} max={d.max()} mean={d.mean():.4f}")
        lines.append(f"zero_degree_users: {int((self.user_degree == 0).sum())}")
        lines.append(f"zero_degree_items: {int((self.item_degree == 0).sum())}")
        lines.append(f"zero_degree_nodes: {int((deg == 0).sum())}")
        return "\n".join(lines) + "\n"


def _parse(path, fmt: str):
    """Return (user_tokens, item_tokens, users_seen_in_order) as int lists."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    if not os.path.exists(path):
        raise DataError(f"{path}: no such file")
    users, items, seen = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                ids = [int(p, 10) for p in parts]
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed line {line.rstrip()!r}") from None
            if any(x < 0 for x in ids):
                raise DataError(f"{path}:{lineno}: negative id")
            if fmt == "pair-list" and len(ids) != 2:
                raise DataError(f"{path}:{lineno}: expected 'user item', got {len(ids)} fields")
            seen.append(ids[0])
            users.extend([ids[0]] * (len(ids) - 1))
            items.extend(ids[1:])
    return users, items, seen


def _index(ids_in_order):
    """Map raw ids to contiguous indices; identity when ids are already 0..max."""
    arr = np.asarray(ids_in_order, dtype=np.int64)
    uniq = np.unique(arr)
    if uniq.size == 0:
        return {}, uniq
    if uniq[0] == 0 and uniq[-1] == uniq.size - 1:
        return None, uniq
    _, first = np.unique(arr, return_index=True)
    ordered = arr[np.sort(first)]
    return {int(x): k for k, x in enumerate(ordered)}, ordered


def _build(parsed: list, names: list):
    all_users = [x for users, _, seen in parsed for x in seen + users]
    all_items = [x for _, items, _ in parsed for x in items]
    if not all_items:
        raise DataError(f"{', '.join(map(str, names))}: empty dataset")
    umap, uids = _index(all_users)
    imap, iids = _index(all_items)
    nu, ni = len(uids), len(iids)
    graphs = []
    for users, items, _ in parsed:
        u = np.array([umap[x] for x in users] if umap else users, dtype=np.int64)
        i = np.array([imap[x] for x in items] if imap else items, dtype=np.int64)
        graphs.append(InteractionGraph.from_pairs(u, i, nu, ni, uids, iids))
    return graphs


def load_interactions(path, format: str = "adjacency-list") -> InteractionGraph:
    """Read an interaction file.

    ``adjacency-list`` lines are ``user item item ...``; ``pair-list`` lines
    are ``user item``. Repeated pairs collapse to one edge. Sparse ids are
    re-indexed contiguously in order of first appearance.
    """
    return _build([_parse(path, format)], [path])[0]


def load_split(train_path, test_path, format: str = "adjacency-list"):
    """Load a pre-split train/test pair into one shared index space."""
    return tuple(_build([_parse(train_path, format), _parse(test_path, format)],
                        [train_path, test_path]))


def save_interactions(graph: InteractionGraph, path, format: str = "adjacency-list") -> None:
    with open(path, "w") as fh:
        if format == "adjacency-list":
            for u in range(graph.num_users):
                fh.write(" ".join(map(str, [u, *graph.items_of(u).tolist()])) + "\n")
        elif format == "pair-list":
            for u, i in zip(*graph.edges()):
                fh.write(f"{u} {i}\n")
        else:
            raise ValueError(f"unknown format {format!r}")


def split_train_test(graph: InteractionGraph, ratio: float = 0.8, seed: int = 0):
    """Per-user random split; every user with interactions keeps one in train."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    tr_u, tr_i, te_u, te_i = [], [], [], []
    for u in range(graph.num_users):
        items = graph.items_of(u)
        d = items.size
        if d == 0:
            continue
        perm = rng.permutation(d)
        n_train = max(int(round(ratio * d)), 1)
        tr, te = items[np.sort(perm[:n_train])], items[np.sort(perm[n_train:])]
        tr_u.append(np.full(tr.size, u))
        tr_i.append(tr)
        te_u.append(np.full(te.size, u))
        te_i.append(te)
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64)
    make = lambda u, i: InteractionGraph.from_pairs(cat(u), cat(i), graph.num_users,
                                                    graph.num_items, graph.user_ids, graph.item_ids)
    return make(tr_u, tr_i), make(te_u, te_i)


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """Symmetric ``D^-1/2 (A + I) D^-1/2`` over all users and items, in CSR."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    degrees: np.ndarray
    num_users: int = 0

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.indices, self.indptr), shape=(self.n, self.n))

    @cached_property
    def matrix32(self) -> sp.csr_matrix:
        return self.matrix.astype(np.float32)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def num_edges(self) -> int:
        return int(self.degrees.sum()) // 2

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()


def build_normalized_adjacency(graph: InteractionGraph) -> NormalizedAdjacency:
    n, nu = graph.num_nodes, graph.num_users
    deg = graph.degrees.astype(np.int64)
    u, i = graph.edges()
    i = i + nu
    off = 1.0 / np.sqrt((deg[u] + 1.0) * (deg[i] + 1.0))
    rows = np.concatenate([np.arange(n), u, i])
    cols = np.concatenate([np.arange(n), i, u])
    vals = np.concatenate([1.0 / (deg + 1.0), off, off])
    coo = sp.coo_matrix((vals, (rows, cols)), shape=(n, n))
    csr = coo.tocsr()
    csr.sort_indices()
    return NormalizedAdjacency(n, csr.indptr.astype(np.int64), csr.indices.astype(np.int64),
                               csr.data.astype(np.float64), deg, nu)


def spmm(adj: NormalizedAdjacency, dense: np.ndarray) -> np.ndarray:
    """Sparse-dense product ``adj @ dense``; float32 input stays float32."""
    dense = np.asarray(dense)
    if dense.shape[0] != adj.n:
        raise ValueError(f"dimension mismatch: adjacency is {adj.n}x{adj.n}, dense has {dense.shape[0]} rows")
    m = adj.matrix32 if dense.dtype == np.float32 else adj.matrix
    return np.asarray(m @ dense)
