"""Closed-form over-smoothing steady state and smoothing diagnostics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .graph import spmm

EXACT_ROW_DIFF_LIMIT = 20_000


@dataclass(frozen=True, eq=False)
class OverSmoothingState:
    """Rank-1 form of the steady-state matrix ``M = (1/c) w w^T E0``.

    ``w_a = sqrt(d_a + 1)``, ``c = 2 * edges + nodes`` and ``s = w^T E0``, so
    the steady point of node ``a`` is ``(w_a / c) * s``.
    """

    c: float
    weight: np.ndarray
    s: np.ndarray
    num_components: int = 1

    @property
    def n(self) -> int:
        return int(self.weight.size)

    def coef(self, dtype=np.float64) -> np.ndarray:
        return (self.weight / self.c).astype(dtype)

    def point(self, a: int) -> np.ndarray:
        return (self.weight[a] / self.c) * self.s

    def rows(self, idx=None, dtype=None) -> np.ndarray:
        """Materialize rows of M (all rows when ``idx`` is None)."""
        dtype = dtype or self.s.dtype
        w = self.weight if idx is None else self.weight[idx]
        return np.outer((w / self.c).astype(dtype), self.s.astype(dtype))

    def matrix(self) -> np.ndarray:
        return self.rows()


def steady_state_weights(degrees) -> tuple[np.ndarray, float]:
    deg = np.asarray(degrees, dtype=np.float64)
    return np.sqrt(deg + 1.0), float(np.sum(deg + 1.0))


def compute_oversmoothing_state(graph, E0: np.ndarray, warn: bool = True) -> OverSmoothingState:
    """Steady state of repeated propagation for embeddings ``E0``.

    ``graph`` may be an InteractionGraph or a NormalizedAdjacency; only the
    node degrees are used. The global formula is applied even to
    disconnected graphs, with a warning.
    """
    E0 = np.asarray(E0)
    w, c = steady_state_weights(graph.degrees)
    if E0.shape[0] != w.size:
        raise ValueError(f"E0 has {E0.shape[0]} rows, graph has {w.size} nodes")
    ncomp = getattr(graph, "num_components", 1)
    if warn and ncomp > 1:
        warnings.warn(f"graph has {ncomp} connected components; steady state uses the "
                      "single-component formula", RuntimeWarning, stacklevel=2)
    s = w.astype(E0.dtype) @ E0
    return OverSmoothingState(c, w, s, ncomp)


def dense_limit(degrees) -> np.ndarray:
    """Entrywise ``A^inf[a, b] = sqrt((d_a+1)(d_b+1)) / c`` as a dense matrix."""
    deg = np.asarray(degrees, dtype=np.float64)
    c = deg.sum() + deg.size
    return np.sqrt(np.outer(deg + 1.0, deg + 1.0)) / c


def power_iterate_reference(adj, E0: np.ndarray, k: int) -> np.ndarray:
    """``adj^k @ E0`` by repeated sparse products."""
    if k < 0:
        raise ValueError("k must be >= 0")
    E = np.array(E0, copy=True)
    for _ in range(k):
        E = spmm(adj, E)
    return E


def mean_distance_to_M(Ek: np.ndarray, state: OverSmoothingState) -> float:
    """Mean Euclidean distance of each row of ``Ek`` to its steady point."""
    Ek = np.asarray(Ek)
    if Ek.shape != (state.n, state.s.size):
        raise ValueError(f"shape {Ek.shape} does not match state ({state.n}, {state.s.size})")
    diff = Ek - state.rows(dtype=np.result_type(Ek.dtype, np.float64))
    return float(np.mean(np.linalg.norm(diff, axis=1)))


def distance_curve(adj, E0: np.ndarray, ks=range(1, 21), state=None) -> list[tuple[int, float]]:
    """``(k, D(adj^k E0, M))`` for each requested k."""
    if state is None:
        state = compute_oversmoothing_state(adj, E0, warn=False)
    ks = sorted(ks)
    out, E, cur = [], np.array(E0, dtype=np.float64), 0
    for k in ks:
        while cur < k:
            E = spmm(adj, E)
            cur += 1
        out.append((k, mean_distance_to_M(E, state)))
    return out


def row_diff(E: np.ndarray, sampled: bool | None = None, n_pairs: int = 1_000_000,
             seed: int = 0, return_stderr: bool = False):
    """Mean pairwise Euclidean distance over all ordered row pairs (diagonal included).

    Exact for ``n <= 20000`` unless ``sampled=True``; otherwise a Monte-Carlo
    estimate over uniformly drawn ordered pairs. With ``return_stderr`` a
    ``(value, stderr)`` tuple is returned (stderr is 0.0 in exact mode).
    """
    E = np.asarray(E, dtype=np.float64)
    n = E.shape[0]
    if n < 1:
        raise ValueError("row_diff needs at least one row")
    if sampled is None:
        sampled = n > EXACT_ROW_DIFF_LIMIT
    if not sampled:
        value = 2.0 * pdist(E).sum() / (n * n) if n > 1 else 0.0
        return (value, 0.0) if return_stderr else value
    rng = np.random.default_rng(seed)
    total, sq, done = 0.0, 0.0, 0
    chunk = 100_000
    while done < n_pairs:
        m = min(chunk, n_pairs - done)
        a, b = rng.integers(0, n, m), rng.integers(0, n, m)
        d = np.linalg.norm(E[a] - E[b], axis=1)
        total += d.sum()
        sq += (d * d).sum()
        done += m
    mean = total / n_pairs
    var = max(sq / n_pairs - mean * mean, 0.0)
    stderr = float(np.sqrt(var / n_pairs))
    return (mean, stderr) if return_stderr else mean
