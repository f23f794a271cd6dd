"""Plain-text run configuration: ``key = value`` lines with ``#`` comments."""

from __future__ import annotations

from dataclasses import dataclass, field

from .trainer import TrainConfig

PATH_KEYS = {
    "data": None,
    "format": "adjacency-list",
    "split_ratio": "0.8",
    "split_seed": "0",
    "train": None,
    "test": None,
    "index": None,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=lambda: {k: v for k, v in PATH_KEYS.items() if v is not None})

    def set(self, key: str, value: str) -> None:
        key = key.strip()
        value = value.strip()
        if key in PATH_KEYS:
            self.paths[key] = value
            return
        try:
            self.train.set(key, value)
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r}: {e}") from None

    def get(self, key, default=None):
        return self.paths.get(key, default)

    @property
    def split_ratio(self) -> float:
        return float(self.paths.get("split_ratio", 0.8))

    @property
    def split_seed(self) -> int:
        return int(self.paths.get("split_seed", 0))

    def dumps(self) -> str:
        lines = [f"{k} = {self.paths[k]}" for k in PATH_KEYS if k in self.paths]
        lines += [f"{k} = {v}" for k, v in self.train.items()]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    def copy(self) -> "RunConfig":
        return loads(self.dumps())


def loads(text: str, source: str = "<string>") -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        try:
            cfg.set(k, v)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return cfg


def load(path) -> RunConfig:
    with open(path) as fh:
        return loads(fh.read(), str(path))


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.set(*item.split("=", 1))
    return cfg
