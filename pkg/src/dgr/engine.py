"""Linear graph propagation with desmoothing perturbation, and its exact backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import NormalizedAdjacency, spmm
from .oversmooth import OverSmoothingState, compute_oversmoothing_state

PROPAGATIONS = ("gmp", "residual")


@dataclass(frozen=True)
class GmpSchedule:
    """Per-layer perturbation strengths ``alpha_1..alpha_K``."""

    alpha: tuple

    def __post_init__(self):
        alpha = tuple(float(a) for a in self.alpha)
        if not all(np.isfinite(alpha)):
            raise ValueError(f"alpha must be finite, got {alpha}")
        if any(a < 0 for a in alpha):
            raise ValueError(f"alpha must be >= 0, got {alpha}")
        object.__setattr__(self, "alpha", alpha)

    def __len__(self):
        return len(self.alpha)

    @classmethod
    def zeros(cls, K: int) -> "GmpSchedule":
        return cls((0.0,) * K)


@dataclass
class EmbeddingState:
    E0: np.ndarray
    layers: list
    readout: np.ndarray
    schedule: GmpSchedule | None = None
    state: OverSmoothingState | None = None
    propagation: str = "gmp"

    @property
    def K(self) -> int:
        return len(self.layers) - 1

    @property
    def layer_cache(self) -> list:
        return self.layers


def gmp_step(adj: NormalizedAdjacency, E_prev: np.ndarray, state: OverSmoothingState,
             alpha: float) -> np.ndarray:
    """One propagation followed by ``(1 + alpha) * AE - alpha * M``."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    hat = spmm(adj, E_prev)
    if alpha == 0:
        return hat
    return perturb(hat, state, alpha)


def perturb(hat: np.ndarray, state: OverSmoothingState, alpha: float) -> np.ndarray:
    """Push rows of ``hat`` away from their steady points: ``(1+a) hat - a m``."""
    dt = hat.dtype
    coef = state.coef(dt)
    s = state.s.astype(dt)
    return dt.type(1.0 + alpha) * hat - np.outer(dt.type(alpha) * coef, s)


def residual_step(adj: NormalizedAdjacency, E_prev: np.ndarray, E0: np.ndarray,
                  alpha: float) -> np.ndarray:
    """Initial-residual variant: ``AE + alpha (E0 - AE)``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"residual alpha must lie in [0, 1], got {alpha}")
    hat = spmm(adj, E_prev)
    return hat + alpha * (E0 - hat)


def _schedule(schedule, K):
    if schedule is None:
        return GmpSchedule.zeros(K)
    if not isinstance(schedule, GmpSchedule):
        schedule = GmpSchedule(tuple(schedule))
    if len(schedule) != K:
        raise ValueError(f"schedule has {len(schedule)} entries, K={K}")
    return schedule


def forward(E0: np.ndarray, adj: NormalizedAdjacency, K: int, schedule=None,
            state: OverSmoothingState | None = None, propagation: str = "gmp") -> EmbeddingState:
    """Propagate ``E0`` through K layers and average all layer outputs.

    With ``propagation="gmp"`` each layer applies the steady-state push with
    the schedule's alpha; the steady state is recomputed from ``E0`` unless
    one is passed in. ``propagation="residual"`` uses the schedule as
    initial-residual weights instead.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if propagation not in PROPAGATIONS:
        raise ValueError(f"unknown propagation {propagation!r}")
    sched = _schedule(schedule, K)
    layers = [E0]
    E = E0
    if propagation == "gmp":
        if state is None and any(sched.alpha):
            state = compute_oversmoothing_state(adj, E0, warn=False)
        for a in sched.alpha:
            E = gmp_step(adj, E, state, a)
            layers.append(E)
    else:
        for a in sched.alpha:
            E = residual_step(adj, E, E0, a)
            layers.append(E)
    readout = layers[0].copy()
    for L in layers[1:]:
        readout += L
    readout /= K + 1
    return EmbeddingState(E0, layers, readout, sched, state, propagation)


def backward(grad_readout: np.ndarray, cache: EmbeddingState, adj: NormalizedAdjacency,
             schedule=None, state: OverSmoothingState | None = None,
             differentiate_steady_state: bool = False) -> np.ndarray:
    """Gradient with respect to ``E0`` given the gradient at the readout.

    The steady state is held constant unless ``differentiate_steady_state``
    is set, in which case the rank-1 coupling ``-alpha_k (w w^T / c) g_k``
    is added for each layer.
    """
    K = cache.K
    sched = _schedule(schedule if schedule is not None else cache.schedule, K)
    if cache.schedule is not None and sched.alpha != cache.schedule.alpha:
        raise ValueError("schedule does not match the forward cache")
    if grad_readout.shape != cache.readout.shape:
        raise ValueError(f"grad shape {grad_readout.shape} != readout shape {cache.readout.shape}")
    dt = grad_readout.dtype
    share = grad_readout / dt.type(K + 1)
    g = share
    direct = np.zeros_like(share) if cache.propagation == "residual" else None
    state = state if state is not None else cache.state
    coupling = None
    for k in range(K, 0, -1):
        a = sched.alpha[k - 1]
        if cache.propagation == "gmp":
            if differentiate_steady_state and a != 0:
                coef = state.coef(dt)
                term = np.outer(coef, coef @ g * dt.type(state.c))  # (w/c) w^T g
                coupling = -a * term if coupling is None else coupling - a * term
            back = spmm(adj, g)
            g_prev = back if a == 0 else dt.type(1.0 + a) * back
        else:
            direct += dt.type(a) * g
            g_prev = dt.type(1.0 - a) * spmm(adj, g)
        g = g_prev + share
    if direct is not None:
        g = g + direct
    if coupling is not None:
        g = g + coupling
    return g


def predict(readout: np.ndarray, u: int, i: int, num_users: int) -> float:
    """Inner-product score of user ``u`` and item ``i``."""
    n = readout.shape[0]
    if not 0 <= u < num_users or not 0 <= i < n - num_users:
        raise IndexError(f"user {u} / item {i} out of range")
    return float(readout[u] @ readout[num_users + i])
