"""Hyperparameters and the flat ``key = value`` config format.

Full-size defaults come from ``volleyball`` and ``cad``; ``desk`` is the CPU-sized
preset used by the synthetic benchmark.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class ModelConfig:
    d: int = 256
    d_type: int = 64
    d_fourier: int = 64
    d_time: int = 64
    d_mlp: int = 1024
    heads: tuple[int, ...] = (2, 8, 2, 2)
    dropout: tuple[float, ...] = (0.5, 0.2, 0.2, 0.0)
    blocks: int = 2
    num_scales: int = 4
    gcn_layers: int = 3
    fourier_sigma: float = 4.0
    multiscale: bool = True  # False: "No Multiscale Transformer" ablation
    grouping: str = "heuristic"  # or "kmeans"


@dataclass
class ClusterConfig:
    enabled: bool = True
    K: int = 1000
    tau: float = 0.1
    eps: float = 0.05
    sinkhorn_iters: int = 3


@dataclass
class AugConfig:
    flip: bool = True
    hmove: bool = True
    vmove: bool = True
    dropout: bool = True
    flip_p: float = 0.5
    move_p: float = 0.5
    dropout_p: float = 0.5
    move_bound: int = 10
    perturb_px: float = 1.0


@dataclass
class TrainConfig:
    epochs: int = 45
    batch_size: int = 256
    lr: float = 5e-4
    lr_drop_epoch: int = 40
    lr_dropped: float = 1e-4
    weight_decay: float = 1e-3
    lam: float = 3.0
    aux: bool = True
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    aug: AugConfig = field(default_factory=AugConfig)

    def validate(self) -> "TrainConfig":
        m = self.model
        if not 1 <= m.num_scales <= 4:
            raise ConfigError("model.num_scales must be in 1..4", "model.num_scales")
        if len(m.heads) != 4 or len(m.dropout) != 4:
            raise ConfigError("model.heads and model.dropout need 4 entries", "model.heads")
        for h in m.heads:
            if m.d % h:
                raise ConfigError(f"model.d={m.d} not divisible by head count {h}", "model.heads")
        if m.grouping not in ("heuristic", "kmeans"):
            raise ConfigError("model.grouping must be heuristic or kmeans", "model.grouping")
        if m.d_fourier % 2:
            raise ConfigError("model.d_fourier must be even", "model.d_fourier")
        if self.cluster.K < 2:
            raise ConfigError("cluster.K must be >= 2", "cluster.K")
        if m.blocks < 1:
            raise ConfigError("model.blocks must be >= 1", "model.blocks")
        return self


def volleyball() -> TrainConfig:
    return TrainConfig().validate()


def cad() -> TrainConfig:
    cfg = TrainConfig()
    cfg.model.d = 128
    cfg.model.d_type = cfg.model.d_fourier = cfg.model.d_time = 32
    cfg.model.grouping = "kmeans"
    return cfg.validate()


def desk() -> TrainConfig:
    cfg = TrainConfig(epochs=30, batch_size=32)
    cfg.model = ModelConfig(d=32, d_type=8, d_fourier=8, d_time=8, d_mlp=128, heads=(2, 4, 2, 2))
    cfg.cluster.K = 32
    return cfg.validate()


PRESETS = {"volleyball": volleyball, "cad": cad, "desk": desk}

# flat key prefix -> TrainConfig attribute holding that section
_SECTIONS = {"model": "model", "cluster": "cluster", "aug": "aug", "train": None}
_KEY_NAMES = {"lam": "lambda"}


def _flat_fields(cfg: TrainConfig):
    for prefix, attr in _SECTIONS.items():
        obj = cfg if attr is None else getattr(cfg, attr)
        for f in dataclasses.fields(obj):
            if f.name in _SECTIONS.values():
                continue
            yield f"{prefix}.{_KEY_NAMES.get(f.name, f.name)}", obj, f.name


CONFIG_KEYS: tuple[str, ...] = tuple(k for k, _, _ in _flat_fields(TrainConfig()))


def to_flat(cfg: TrainConfig) -> dict[str, str]:
    out = {}
    for key, obj, name in _flat_fields(cfg):
        out[key] = _format(getattr(obj, name))
    return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "1", "yes", "on")
        if isinstance(current, tuple):
            kind = type(current[0])
            return tuple(kind(v) for v in raw.split(","))
        return type(current)(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}", key) from None


def set_key(cfg: TrainConfig, key: str, raw: str) -> None:
    for k, obj, name in _flat_fields(cfg):
        if k == key:
            setattr(obj, name, _parse(raw, getattr(obj, name), key))
            return
    raise ConfigError(f"unknown config key: {key}", key)


def dumps(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_flat(cfg).items())


def loads(text: str, require_all: bool = True) -> TrainConfig:
    """Parse a flat config. Every key in ``CONFIG_KEYS`` must appear unless ``require_all`` is off."""
    cfg = TrainConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        set_key(cfg, key, value)
        seen.add(key)
    if require_all:
        for key in CONFIG_KEYS:
            if key not in seen:
                raise ConfigError(f"missing config key: {key}", key)
    return cfg.validate()


def load(path: str | Path, require_all: bool = True) -> TrainConfig:
    return loads(Path(path).read_text(), require_all)


def save(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))
