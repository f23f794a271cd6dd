"""Mini-batch BPR + LEC training of the propagation model with sparse Adam."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .engine import GmpSchedule, backward, forward
from .graph import InteractionGraph, build_normalized_adjacency
from .losses import BatchTriples, LecIndex, bpr_loss, build_lec_index, l2_regularizer, lec_loss
from .metrics import evaluate
from .oversmooth import compute_oversmoothing_state, row_diff

log = logging.getLogger(__name__)

MAX_REJECTIONS = 100


class NonFiniteLossError(FloatingPointError):
    pass


def _floats(v):
    if isinstance(v, str):
        v = [x for x in v.replace("[", "").replace("]", "").split(",") if x.strip()]
    return tuple(float(x) for x in v)


def _ints(v):
    return tuple(int(x) for x in _floats(v))


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


@dataclass
class TrainConfig:
    K: int = 3
    T: int = 64
    lr: float = 1e-3
    batch_size: int = 2048
    epochs: int = 300
    lam: float = 0.1
    alpha: tuple = (0.1, 0.8, 0.1)
    K1: int = 30
    K2: int = 50
    theta: int = 50
    l2: float = 1e-4
    seed: int = 0
    eval_every: int = 1
    eval_ks: tuple = (20,)
    gmp_enabled: bool = True
    lec_enabled: bool = True
    precision: str = "float32"
    propagation: str = "gmp"
    differentiate_steady_state: bool = False
    lec_normalize_pairs: bool = False
    state_refresh: str = "step"
    patience: int = 20
    init_std: float = 0.1
    deterministic: bool = True
    track_row_diff: bool = True

    def __post_init__(self):
        self.alpha = _floats(self.alpha)
        self.eval_ks = _ints(self.eval_ks)

    def validate(self) -> "TrainConfig":
        for name in ("K", "T", "batch_size", "eval_every", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if len(self.alpha) != self.K:
            raise ValueError(f"alpha has {len(self.alpha)} entries but K={self.K}")
        if any(a < 0 for a in self.alpha):
            raise ValueError("alpha entries must be >= 0")
        if min(self.lam, self.l2, self.K1, self.K2, self.theta) < 0:
            raise ValueError("lam, l2, K1, K2 and theta must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.propagation not in ("gmp", "residual"):
            raise ValueError(f"unknown propagation {self.propagation!r}")
        if self.state_refresh not in ("step", "epoch"):
            raise ValueError(f"state_refresh must be step or epoch")
        return self

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def schedule(self) -> GmpSchedule | None:
        if self.propagation == "residual" or self.gmp_enabled:
            return GmpSchedule(self.alpha)
        return None

    @property
    def main_k(self) -> int:
        return 20 if 20 in self.eval_ks else self.eval_ks[0]

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def set(self, key: str, value) -> None:
        types = {f.name: f.type for f in dataclasses.fields(self)}
        if key not in types:
            raise KeyError(f"unknown config key {key!r}")
        current = getattr(self, key)
        if key == "alpha":
            value = _floats(value)
        elif key == "eval_ks":
            value = _ints(value)
        elif isinstance(current, bool):
            value = _bool(value)
        elif isinstance(current, int):
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        else:
            value = str(value)
        setattr(self, key, value)

    def items(self) -> list[tuple[str, str]]:
        out = []
        for k in self.keys():
            v = getattr(self, k)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            out.append((k, str(v)))
        return out

    @classmethod
    def from_items(cls, pairs) -> "TrainConfig":
        cfg = cls()
        for k, v in pairs:
            cfg.set(k, v)
        return cfg


class SparseAdam:
    """Adam whose moments and bias corrections advance per touched row."""

    def __init__(self, shape, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, dtype=np.float32):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.steps = np.zeros(shape[0], dtype=np.int64)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        rows = np.flatnonzero(np.any(grad != 0, axis=1))
        if rows.size == 0:
            return rows
        b1, b2 = self.betas
        dt = params.dtype.type
        g = grad[rows]
        self.steps[rows] += 1
        t = self.steps[rows].astype(np.float64)
        m = self.m[rows] * dt(b1) + dt(1 - b1) * g
        v = self.v[rows] * dt(b2) + dt(1 - b2) * (g * g)
        self.m[rows], self.v[rows] = m, v
        bc1 = (1.0 - b1 ** t).astype(params.dtype)[:, None]
        bc2 = (1.0 - b2 ** t).astype(params.dtype)[:, None]
        params[rows] -= dt(self.lr) * (m / bc1) / (np.sqrt(v / bc2) + dt(self.eps))
        return rows

    def state_dict(self) -> dict:
        return {"m": self.m, "v": self.v, "steps": self.steps}

    def load_state_dict(self, d) -> None:
        self.m, self.v, self.steps = np.array(d["m"]), np.array(d["v"]), np.array(d["steps"])


def sample_batch(train: InteractionGraph, batch_size: int, rng: np.random.Generator) -> BatchTriples:
    """Uniform training edges paired with rejection-sampled negative items."""
    if train.num_edges == 0:
        raise ValueError("training graph has no edges")
    eu, ei = train.edges()
    idx = rng.integers(0, train.num_edges, batch_size)
    u, i = eu[idx], ei[idx]
    j = rng.integers(0, train.num_items, batch_size)
    bad = train.has_edges(u, j)
    for _ in range(MAX_REJECTIONS):
        if not bad.any():
            break
        pos = np.flatnonzero(bad)
        j[pos] = rng.integers(0, train.num_items, pos.size)
        bad[pos] = train.has_edges(u[pos], j[pos])
    if bad.any():
        users = sorted(set(u[bad].tolist()))
        warnings.warn(f"skipping {int(bad.sum())} triples of users {users[:10]} with no "
                      f"negative found after {MAX_REJECTIONS} rejections", RuntimeWarning, stacklevel=2)
        keep = ~bad
        u, i, j = u[keep], i[keep], j[keep]
    return BatchTriples(u, i, j)


class Model:
    """Trainable layer-0 embeddings together with the fixed graph structures."""

    def __init__(self, config: TrainConfig, train: InteractionGraph, index: LecIndex | None = None,
                 E0: np.ndarray | None = None):
        self.config = config.validate()
        self.train = train
        self.adj = build_normalized_adjacency(train)
        self.num_users = train.num_users
        seeds = np.random.SeedSequence(config.seed).spawn(2)
        self.sample_rng = np.random.default_rng(seeds[1])
        if E0 is None:
            init = np.random.default_rng(seeds[0])
            E0 = init.normal(0.0, config.init_std, size=(train.num_nodes, config.T))
        if E0.shape != (train.num_nodes, config.T):
            raise ValueError(f"E0 shape {E0.shape} != ({train.num_nodes}, {config.T})")
        self.E0 = np.ascontiguousarray(E0, dtype=config.dtype)
        self.optimizer = SparseAdam(self.E0.shape, lr=config.lr, dtype=config.dtype)
        if config.lec_enabled and index is None:
            index = build_lec_index(train, config.K1, config.K2, config.theta)
        self.index = index
        self._state = None

    def steady_state(self, refresh: bool = True):
        if self._state is None or refresh:
            self._state = compute_oversmoothing_state(self.adj, self.E0, warn=False)
        return self._state

    def forward(self, state=None):
        cfg = self.config
        sched = cfg.schedule
        if state is None and sched is not None and cfg.propagation == "gmp":
            state = self.steady_state()
        return forward(self.E0, self.adj, cfg.K, sched, state, cfg.propagation)

    def readout(self) -> np.ndarray:
        return self.forward().readout


def objective(model: Model, batch: BatchTriples, config: TrainConfig | None = None):
    """Composite loss ``BPR + lambda * LEC + L2`` and its gradient with respect to E0."""
    cfg = config or model.config
    nu = model.num_users
    state = None
    if cfg.schedule is not None and cfg.propagation == "gmp":
        state = model.steady_state(refresh=cfg.state_refresh == "step" or model._state is None)
    emb = forward(model.E0, model.adj, cfg.K, cfg.schedule, state, cfg.propagation)
    readout = emb.readout
    loss_cf, g_cf = bpr_loss(batch, readout, nu)
    G = g_cf.to_dense(readout.shape[0])
    loss_lec = 0.0
    if cfg.lec_enabled and cfg.lam > 0:
        loss_lec, g_lec = lec_loss(batch.users, batch.pos, readout, model.index, model.train,
                                   cfg.lec_normalize_pairs)
        g_lec.add_to(G, cfg.lam)
    grad = backward(G, emb, model.adj, cfg.schedule, state, cfg.differentiate_steady_state)
    loss_l2, g_l2 = l2_regularizer(model.E0, batch.rows(nu), cfg.l2)
    g_l2.add_to(grad)
    lam = cfg.lam if cfg.lec_enabled else 0.0
    parts = {"loss_cf": loss_cf, "loss_lec": loss_lec, "loss_l2": loss_l2,
             "total": loss_cf + lam * loss_lec + loss_l2}
    return parts, grad


def train_step(model: Model, batch: BatchTriples, config: TrainConfig | None = None,
               optimizer: SparseAdam | None = None) -> dict:
    """Forward, BPR + lambda * LEC on the readout, backward to E0, L2, sparse Adam."""
    opt = optimizer or model.optimizer
    parts, grad = objective(model, batch, config)
    if not math.isfinite(parts["total"]) or not np.all(np.isfinite(grad)):
        raise NonFiniteLossError(f"non-finite loss or gradient: {parts} "
                                 f"|E0|max={np.abs(model.E0).max()}")
    opt.step(model.E0, grad)
    return {**parts, "grad_norm": float(np.linalg.norm(grad)), "n": len(batch)}


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"DGRCKPT1\n"


class CheckpointError(ValueError):
    code = 10


class BadMagicError(CheckpointError):
    code = 11


class TruncatedCheckpointError(CheckpointError):
    code = 12


class DimensionMismatchError(CheckpointError):
    code = 13


def checkpoint_save(E0: np.ndarray, config: TrainConfig, path, extra: dict | None = None) -> None:
    """Magic line, ``key=value`` header ended by a blank line, then raw little-endian floats."""
    E0 = np.asarray(E0)
    dtype = "float64" if E0.dtype == np.float64 else "float32"
    head = [("n", E0.shape[0]), ("T", E0.shape[1]), ("dtype", dtype)]
    head += [(k, v) for k, v in config.items() if k != "T"]
    head += list((extra or {}).items())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        for k, v in head:
            fh.write(f"{k}={v}\n".encode())
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(E0, dtype="<f8" if dtype == "float64" else "<f4").tobytes())
    os.replace(tmp, path)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    if fh.read(len(MAGIC)) != MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    meta = {}
    while True:
        line = fh.readline()
        if not line:
            raise TruncatedCheckpointError(f"{path}: truncated header")
        if line == b"\n":
            return meta
        k, _, v = line.decode().rstrip("\n").partition("=")
        meta[k] = v


def checkpoint_load(path, expect_shape=None) -> tuple[np.ndarray, TrainConfig]:
    with open(path, "rb") as fh:
        meta = _read_header(fh, path)
        n, T = int(meta["n"]), int(meta["T"])
        if expect_shape is not None and tuple(expect_shape) != (n, T):
            raise DimensionMismatchError(f"{path}: checkpoint is {n}x{T}, expected "
                                         f"{expect_shape[0]}x{expect_shape[1]}")
        dt = np.dtype("<f8" if meta.get("dtype") == "float64" else "<f4")
        raw = fh.read()
    if len(raw) < n * T * dt.itemsize:
        raise TruncatedCheckpointError(f"{path}: truncated data ({len(raw)} of {n * T * dt.itemsize} bytes)")
    if len(raw) > n * T * dt.itemsize:
        raise DimensionMismatchError(f"{path}: trailing data beyond {n}x{T}")
    E0 = np.frombuffer(raw, dtype=dt).reshape(n, T).astype(dt.newbyteorder("="))
    keys = set(TrainConfig.keys())
    cfg = TrainConfig.from_items([(k, v) for k, v in meta.items() if k in keys])
    cfg.T = T
    return E0, cfg


# ---------------------------------------------------------------------------
# fit

@dataclass
class FitResult:
    E0: np.ndarray
    best_E0: np.ndarray
    best_epoch: int
    best_metric: float
    history: list = field(default_factory=list)
    model: Model | None = None

    def readout(self, E0=None) -> np.ndarray:
        m = self.model
        return forward(self.best_E0 if E0 is None else E0, m.adj, m.config.K, m.config.schedule,
                       None, m.config.propagation).readout


def history_columns(config: TrainConfig) -> list[str]:
    cols = ["epoch", "loss_cf", "loss_lec"]
    for k in config.eval_ks:
        cols += [f"recall@{k}", f"ndcg@{k}"]
    return cols + ["row_diff"]


def write_history(history, config, path) -> None:
    cols = history_columns(config)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])


def _save_state(path, model, epoch, history, best):
    np.savez(f"{path}.state.npz", best_E0=best[0], **model.optimizer.state_dict())
    with open(f"{path}.state.json", "w") as fh:
        json.dump({"epoch": epoch, "rng": model.sample_rng.bit_generator.state,
                   "history": history, "best_epoch": best[1], "best_metric": best[2],
                   "stale": best[3]}, fh)


def fit(config: TrainConfig, train: InteractionGraph, test: InteractionGraph | None,
        out_dir=None, index: LecIndex | None = None, resume=None, E0=None) -> FitResult:
    """Train for ``config.epochs`` epochs, evaluating every ``eval_every``.

    Keeps the best embeddings by Recall@20 on ``test`` and stops early after
    ``patience`` evaluations without improvement. With ``out_dir`` set, the
    history CSV and ``last``/``best`` checkpoints are written there; ``resume``
    continues from a ``last`` checkpoint written by a previous call.
    """
    config.validate()
    start_epoch, history = 0, []
    saved = None
    if resume is not None:
        E0, _ = checkpoint_load(resume, expect_shape=(train.num_nodes, config.T))
        if os.path.exists(f"{resume}.state.json"):
            with open(f"{resume}.state.json") as fh:
                saved = json.load(fh)
    model = Model(config, train, index, E0)
    best = [model.E0.copy(), 0, -math.inf, 0]
    if saved is not None:
        arrays = np.load(f"{resume}.state.npz")
        model.optimizer.load_state_dict(arrays)
        model.sample_rng.bit_generator.state = saved["rng"]
        start_epoch, history = saved["epoch"], saved["history"]
        best = [np.array(arrays["best_E0"]), saved["best_epoch"], saved["best_metric"], saved["stale"]]
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    steps = math.ceil(train.num_edges / config.batch_size)
    Kmain = config.main_k
    for epoch in range(start_epoch + 1, config.epochs + 1):
        if best[3] >= config.patience:
            break
        if config.state_refresh == "epoch":
            model.steady_state(refresh=True)
        cf = lec = 0.0
        n = 0
        for _ in range(steps):
            batch = sample_batch(train, config.batch_size, model.sample_rng)
            rep = train_step(model, batch)
            cf += rep["loss_cf"]
            lec += rep["loss_lec"]
            n += rep["n"]
        if epoch % config.eval_every and epoch != config.epochs:
            continue
        row = {"epoch": epoch, "loss_cf": cf / max(n, 1), "loss_lec": lec / max(n, 1)}
        readout = model.readout()
        if test is not None:
            rep = evaluate(readout, train, test, config.eval_ks)
            for k in config.eval_ks:
                row[f"recall@{k}"], row[f"ndcg@{k}"] = rep.recall[k], rep.ndcg[k]
            metric = rep.recall[Kmain]
        else:
            for k in config.eval_ks:
                row[f"recall@{k}"] = row[f"ndcg@{k}"] = float("nan")
            metric = -cf
        row["row_diff"] = row_diff(readout) if config.track_row_diff else float("nan")
        history.append(row)
        log.info("epoch %d loss_cf=%.5f loss_lec=%.5f recall@%d=%.5f", epoch, row["loss_cf"],
                 row["loss_lec"], Kmain, row.get(f"recall@{Kmain}", float("nan")))
        if metric > best[2]:
            best = [model.E0.copy(), epoch, metric, 0]
            if out_dir is not None:
                checkpoint_save(model.E0, config, os.path.join(out_dir, "best.ckpt"), {"epoch": epoch})
        else:
            best[3] += 1
        if out_dir is not None:
            last = os.path.join(out_dir, "last.ckpt")
            checkpoint_save(model.E0, config, last, {"epoch": epoch})
            _save_state(last, model, epoch, history, best)
            write_history(history, config, os.path.join(out_dir, "history.csv"))
    if out_dir is not None:
        write_history(history, config, os.path.join(out_dir, "history.csv"))
    return FitResult(model.E0, best[0], best[1], best[2], history, model)
