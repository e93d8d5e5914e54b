"""Checkpoint directory: ``manifest.json`` plus one raw little-endian tensor blob."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import config
from .config import TrainConfig
from .dataset import FeatureStats, Manifest
from .mstransformer import Composer

FORMAT = "composer-gar-checkpoint"
VERSION = 1
BLOB = "tensors.bin"

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "uint8": (torch.uint8, "|u1"),
}
_NAMES = {torch_dtype: name for name, (torch_dtype, _) in _DTYPES.items()}


class CheckpointError(ValueError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


@dataclass
class Checkpoint:
    model: Composer
    config: TrainConfig
    manifest: Manifest
    stats: FeatureStats
    T: int
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    optimizer_state: dict | None = None
    torch_rng: torch.Tensor | None = None


def _optimizer_tensors(state: dict) -> tuple[dict[str, torch.Tensor], dict]:
    tensors, meta = {}, {"param_groups": state["param_groups"], "state": {}}
    for idx, entry in state["state"].items():
        meta["state"][str(idx)] = sorted(entry)
        for key, value in entry.items():
            tensors[f"optimizer/{idx}/{key}"] = torch.as_tensor(value)
    return tensors, meta


def save_checkpoint(path: str | Path, model: Composer, cfg: TrainConfig, manifest: Manifest,
                    stats: FeatureStats, T: int, *, epoch: int = 0, history: list[dict] | None = None,
                    optimizer: torch.optim.Optimizer | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {f"param/{k}": v.detach() for k, v in model.state_dict().items()}
    optim_meta = None
    if optimizer is not None:
        extra, optim_meta = _optimizer_tensors(optimizer.state_dict())
        tensors.update(extra)
    tensors["rng/torch"] = torch.get_rng_state()

    directory, offset = [], 0
    with open(path / BLOB, "wb") as fh:
        for name, t in tensors.items():
            if t.dtype not in _NAMES:
                raise CheckpointError(f"unsupported dtype {t.dtype} for {name}", name)
            dtype = _NAMES[t.dtype]
            raw = t.cpu().contiguous().numpy().astype(_DTYPES[dtype][1], copy=False).tobytes()
            fh.write(raw)
            directory.append({"name": name, "shape": list(t.shape), "dtype": dtype,
                              "offset": offset, "nbytes": len(raw)})
            offset += len(raw)

    meta = {
        "format": FORMAT,
        "version": VERSION,
        "config": config.to_flat(cfg),
        "dataset_manifest": manifest.to_json(),
        "stats": stats.to_json(),
        "T": T,
        "epoch": epoch,
        "history": history or [],
        "optimizer": optim_meta,
        "tensors": directory,
    }
    (path / "manifest.json").write_text(json.dumps(meta, indent=1))
    return path


def _field(meta: dict, key: str, kind):
    if key not in meta:
        raise CheckpointError(f"checkpoint manifest is missing field {key!r}", key)
    value = meta[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise CheckpointError(f"checkpoint manifest field {key!r} has the wrong type", key)
    return value


def read_manifest(path: str | Path) -> dict:
    file = Path(path) / "manifest.json"
    if not file.is_file():
        raise CheckpointError(f"{file} not found", "manifest.json")
    try:
        meta = json.loads(file.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{file}: invalid JSON ({exc})", "manifest.json") from exc
    if not isinstance(meta, dict):
        raise CheckpointError(f"{file}: expected a JSON object", "manifest.json")
    if _field(meta, "format", str) != FORMAT:
        raise CheckpointError(f"not a checkpoint manifest (format {meta['format']!r})", "format")
    version = _field(meta, "version", int)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})",
                              "version")
    for key, kind in (("config", dict), ("dataset_manifest", dict), ("stats", dict), ("T", int),
                      ("epoch", int), ("history", list), ("tensors", list)):
        _field(meta, key, kind)
    return meta


def _read_tensors(path: Path, directory: list) -> dict[str, torch.Tensor]:
    blob_file = path / BLOB
    if not blob_file.is_file():
        raise CheckpointError(f"{blob_file} not found", BLOB)
    blob = blob_file.read_bytes()
    out = {}
    for i, entry in enumerate(directory):
        where = f"tensors[{i}]"
        if not isinstance(entry, dict):
            raise CheckpointError(f"{where} is not an object", where)
        for key, kind in (("name", str), ("shape", list), ("dtype", str), ("offset", int), ("nbytes", int)):
            try:
                _field(entry, key, kind)
            except CheckpointError as exc:
                raise CheckpointError(f"{where}: {exc}", f"{where}.{key}") from None
        if entry["dtype"] not in _DTYPES:
            raise CheckpointError(f"{where}: unknown dtype {entry['dtype']!r}", f"{where}.dtype")
        torch_dtype, np_dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != count * np.dtype(np_dtype).itemsize:
            raise CheckpointError(f"{where}: nbytes does not match shape and dtype", f"{where}.nbytes")
        if start < 0 or start + nbytes > len(blob):
            raise CheckpointError(f"{where}: byte range outside {BLOB}", f"{where}.offset")
        arr = np.frombuffer(blob, dtype=np_dtype, count=count, offset=start).reshape(shape)
        out[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).to(torch_dtype)
    return out


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    meta = read_manifest(path)
    try:
        cfg = config.loads("\n".join(f"{k} = {v}" for k, v in meta["config"].items()))
    except config.ConfigError as exc:
        raise CheckpointError(f"config: {exc}", f"config.{exc.key}") from exc
    try:
        manifest = Manifest.from_json(meta["dataset_manifest"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"dataset_manifest: {exc}", "dataset_manifest") from exc
    try:
        stats = FeatureStats.from_json(meta["stats"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"stats: {exc}", "stats") from exc

    tensors = _read_tensors(path, meta["tensors"])
    model = Composer(cfg.model, manifest, meta["T"], cfg.cluster.K)
    expected = model.state_dict()
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    for name, ref in expected.items():
        if name not in params:
            raise CheckpointError(f"tensor {name!r} missing from checkpoint", f"param/{name}")
        if params[name].shape != ref.shape:
            raise CheckpointError(f"tensor {name!r} has shape {tuple(params[name].shape)}, "
                                  f"model expects {tuple(ref.shape)}", f"param/{name}")
    unknown = sorted(set(params) - set(expected))
    if unknown:
        raise CheckpointError(f"unexpected tensor {unknown[0]!r}", f"param/{unknown[0]}")
    if params["prototypes"].dtype == torch.float64:
        model.double()
        expected = model.state_dict()
    model.load_state_dict({k: params[k].to(expected[k].dtype) for k in expected})

    optimizer_state = None
    if meta.get("optimizer"):
        om = meta["optimizer"]
        state = {int(idx): {key: tensors[f"optimizer/{idx}/{key}"] for key in keys}
                 for idx, keys in om["state"].items()}
        optimizer_state = {"state": state, "param_groups": om["param_groups"]}
    return Checkpoint(model, cfg, manifest, stats, meta["T"], meta["epoch"], meta["history"],
                      optimizer_state, tensors.get("rng/torch"))
