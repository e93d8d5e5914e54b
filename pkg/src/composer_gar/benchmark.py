"""Synthetic end-to-end benchmark shared by the scripts and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass

from . import synth, train
from .baseline import LinearBaseline, majority_accuracy
from .config import TrainConfig
from .dataset import Manifest, RawClip


@dataclass
class BenchmarkData:
    train: list[RawClip]
    test: list[RawClip]
    manifest: Manifest


@dataclass
class RunResult:
    accuracy: float
    seconds: float
    history: list[dict]


def synthetic_data(sc: synth.SynthConfig | None = None, test_fraction: float = 0.2,
                   split_seed: int = 0) -> BenchmarkData:
    clips, manifest = synth.generate_dataset(sc or synth.SynthConfig())
    tr, te = synth.stratified_split(clips, test_fraction, split_seed)
    return BenchmarkData(tr, te, manifest)


def run(cfg: TrainConfig, data: BenchmarkData, on_epoch=None) -> RunResult:
    """Train on ``data.train`` and report test accuracy of the final model."""
    start = time.perf_counter()
    result = train.fit(cfg, data.train, data.manifest, on_epoch=on_epoch)
    acc = train.evaluate(result.model, data.test, data.manifest, result.stats, cfg).accuracy
    return RunResult(acc, time.perf_counter() - start, result.history)


def baselines(data: BenchmarkData) -> dict[str, float]:
    return {
        "majority": majority_accuracy(data.train, data.test),
        "linear": LinearBaseline(data.manifest).fit(data.train).accuracy(data.test),
    }
