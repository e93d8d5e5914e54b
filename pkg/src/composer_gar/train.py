"""Multitask objective, optimization loop, evaluation and the finite-difference oracle."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import augment
from .cluster import cluster_loss
from .config import TrainConfig
from .dataset import FeatureStats, Manifest, RawClip, compute_stats
from .features import Batch, collate, featurize
from .mstransformer import Composer, ForwardOutput

log = logging.getLogger(__name__)

CSV_FIELDS = ("epoch", "loss_total", "loss_aux", "loss_last", "loss_person", "loss_cluster",
              "train_acc", "val_acc")


@dataclass
class Losses:
    total: torch.Tensor
    aux: torch.Tensor
    last: torch.Tensor
    person: torch.Tensor
    cluster: torch.Tensor
    codes: list = field(default_factory=list)
    person_unlabeled: bool = False

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("total", "aux", "last", "person", "cluster")}


def person_loss(logits: torch.Tensor | None, batch: Batch):
    """Mean cross-entropy over present persons that carry an action label."""
    if logits is None:
        return None
    keep = (batch.person_actions >= 0) & (batch.person_mask > 0)
    if not bool(keep.any()):
        return None
    return F.cross_entropy(logits[keep], batch.person_actions[keep])


def total_loss(model: Composer, out: ForwardOutput, batch: Batch, cfg: TrainConfig,
               codes: list | None = None) -> Losses:
    """aux + lambda * (last + person + cluster); disabled terms are exactly 0."""
    labels = batch.group_label
    zero = out.final_logits.sum() * 0.0
    ce = [[F.cross_entropy(lg, labels) for lg in block] for block in out.group_logits]

    if cfg.aux and cfg.model.multiscale:
        aux = sum((sum(b) for b in ce[:-1]), zero)
        last = sum(ce[-1], zero)
    else:
        aux = zero
        last = ce[-1][-1]

    p = person_loss(out.person_logits, batch)
    unlabeled = p is None and out.person_logits is not None
    p = zero if p is None else p

    clu, used_codes = zero, []
    if cfg.cluster.enabled and len(out.clip_reprs) >= 2:
        c = cfg.cluster
        clu, used_codes = cluster_loss(out.clip_reprs, model.prototypes, c.tau, c.eps,
                                       c.sinkhorn_iters, codes=codes)
    total = aux + cfg.lam * (last + p + clu)
    return Losses(total, aux, last, p, clu, used_codes, unlabeled)


def build_optimizer(model: Composer, cfg: TrainConfig) -> torch.optim.Adam:
    # prototypes and LayerNorm affines are excluded from weight decay
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        if name == "prototypes" or ".ln" in name:
            no_decay.append(param)
        else:
            decay.append(param)
    return torch.optim.Adam([
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ], lr=cfg.lr)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr if epoch < cfg.lr_drop_epoch else cfg.lr_dropped


def train_step(model: Composer, optimizer: torch.optim.Optimizer, batch: Batch,
               cfg: TrainConfig) -> tuple[Losses, ForwardOutput]:
    model.train()
    optimizer.zero_grad()
    out = model(batch)
    losses = total_loss(model, out, batch, cfg)
    losses.total.backward()
    optimizer.step()
    model.normalize_prototypes()
    return losses, out


@dataclass
class EvalResult:
    accuracy: float
    confusion: list[list[int]]
    person_accuracy: float | None
    n: int

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "confusion": self.confusion,
                "person_accuracy": self.person_accuracy, "n": self.n}


@torch.no_grad()
def evaluate_batch(model: Composer, batch: Batch, num_classes: int, chunk: int = 64) -> EvalResult:
    """Accuracy of the last block's last-scale [CLS] prediction; no augmentation, no dropout."""
    was_training = model.training
    model.eval()
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    p_correct = p_total = 0
    for start in range(0, len(batch), chunk):
        part = batch.select(slice(start, start + chunk))
        out = model(part)
        pred = out.final_logits.argmax(-1)
        for t, p in zip(part.group_label.tolist(), pred.tolist()):
            confusion[t, p] += 1
        if out.person_logits is not None:
            keep = (part.person_actions >= 0) & (part.person_mask > 0)
            p_correct += int((out.person_logits.argmax(-1)[keep] == part.person_actions[keep]).sum())
            p_total += int(keep.sum())
    model.train(was_training)
    n = int(confusion.sum())
    return EvalResult(float(np.trace(confusion)) / n if n else 0.0, confusion.tolist(),
                      p_correct / p_total if p_total else None, n)


def make_batch(clips: Sequence[RawClip], manifest: Manifest, stats: FeatureStats,
               cfg: TrainConfig, dtype=torch.float32) -> Batch:
    return collate([featurize(c, manifest, stats, cfg.model.grouping) for c in clips], dtype)


def evaluate(model: Composer, clips: Sequence[RawClip], manifest: Manifest, stats: FeatureStats,
             cfg: TrainConfig) -> EvalResult:
    dtype = next(model.parameters()).dtype
    return evaluate_batch(model, make_batch(clips, manifest, stats, cfg, dtype), manifest.num_classes)


@dataclass
class TrainResult:
    model: Composer
    optimizer: torch.optim.Optimizer
    stats: FeatureStats
    history: list[dict]
    T: int


def build_model(cfg: TrainConfig, manifest: Manifest, T: int) -> Composer:
    torch.manual_seed(cfg.seed)
    return Composer(cfg.model, manifest, T, cfg.cluster.K)


def training_batch(clips: Sequence[RawClip], manifest: Manifest, stats: FeatureStats,
                   cfg: TrainConfig, epoch: int, augment_data: bool = True) -> Batch:
    items = []
    for clip in clips:
        if augment_data:
            rng = augment.clip_rng(cfg.seed, clip.clip_id, epoch)
            clip = augment.augment_clip(clip, rng, cfg.aug, manifest)
            feats = augment.augment_features(featurize(clip, manifest, stats, cfg.model.grouping),
                                             rng, cfg.aug)
        else:
            feats = featurize(clip, manifest, stats, cfg.model.grouping)
        items.append(feats)
    return collate(items)


def fit(cfg: TrainConfig, train_clips: Sequence[RawClip], manifest: Manifest,
        val_clips: Sequence[RawClip] | None = None, augment_data: bool = True,
        on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    if not train_clips:
        raise ValueError("no training clips")
    T = train_clips[0].T
    stats = compute_stats(train_clips)
    model = build_model(cfg, manifest, T)
    optimizer = build_optimizer(model, cfg)
    val_batch = make_batch(val_clips, manifest, stats, cfg) if val_clips else None
    history = []
    for epoch in range(cfg.epochs):
        for group in optimizer.param_groups:
            group["lr"] = learning_rate(cfg, epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_clips))
        sums = dict.fromkeys(("total", "aux", "last", "person", "cluster"), 0.0)
        correct = seen = 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_clips[i] for i in order[start:start + cfg.batch_size]]
            batch = training_batch(chunk, manifest, stats, cfg, epoch, augment_data)
            losses, out = train_step(model, optimizer, batch, cfg)
            for k, v in losses.as_floats().items():
                sums[k] += v * len(batch)
            correct += int((out.final_logits.argmax(-1) == batch.group_label).sum())
            seen += len(batch)
        row = {"epoch": epoch + 1, **{f"loss_{k}": v / seen for k, v in sums.items()},
               "train_acc": correct / seen,
               "val_acc": evaluate_batch(model, val_batch, manifest.num_classes).accuracy
               if val_batch is not None else float("nan")}
        history.append(row)
        log.info("epoch %d loss %.4f train %.3f val %.3f", row["epoch"], row["loss_total"],
                 row["train_acc"], row["val_acc"])
        if on_epoch:
            on_epoch(row)
    return TrainResult(model, optimizer, stats, history, T)


def format_csv(history: list[dict]) -> str:
    lines = [",".join(CSV_FIELDS)]
    for row in history:
        lines.append(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                              for k in CSV_FIELDS))
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------ gradient oracle

@dataclass
class GradCheckReport:
    max_rel_error: float         # over coordinates whose difference stencil is smooth
    entries: list[dict]          # one per sampled coordinate, worst first
    kinks: list[dict] = field(default_factory=list)  # stencil crossed a ReLU kink

    @property
    def worst(self) -> list[dict]:
        return self.entries[:10]


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check_fn(loss_fn: Callable[[], torch.Tensor], params: dict[str, torch.Tensor],
                  n_coords: int = 200, step: float = 1e-5, seed: int = 0,
                  floor: float = 1e-8,
                  signature: Callable[[], torch.Tensor] | None = None) -> GradCheckReport:
    """Compare autograd gradients of ``loss_fn`` with central differences.

    Coordinates are drawn uniformly over all entries of ``params``. When
    ``signature`` is given it is read after each evaluation; a coordinate
    whose two evaluations disagree on it (a ReLU changed side between
    x - h and x + h) has no valid central difference and is reported in
    ``kinks`` instead of counting toward the maximum.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    names = list(params)
    sizes = np.array([params[n].numel() for n in names])
    rng = np.random.default_rng(seed)
    flat_choice = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    entries, kinks = [], []
    with torch.no_grad():
        for flat in flat_choice:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, idx = names[k], int(flat - offsets[k])
            p = params[name].view(-1)
            analytic = float(params[name].grad.view(-1)[idx]) if params[name].grad is not None else 0.0
            orig = p[idx].item()
            p[idx] = orig + step
            plus = float(loss_fn())
            sig_plus = signature() if signature else None
            p[idx] = orig - step
            minus = float(loss_fn())
            sig_minus = signature() if signature else None
            p[idx] = orig
            numeric = (plus - minus) / (2 * step)
            entry = {"param": name, "index": idx, "analytic": analytic, "numeric": numeric,
                     "rel_error": relative_error(analytic, numeric, floor)}
            smooth = signature is None or torch.equal(sig_plus, sig_minus)
            (entries if smooth else kinks).append(entry)
    entries.sort(key=lambda e: -e["rel_error"])
    return GradCheckReport(entries[0]["rel_error"] if entries else 0.0, entries, kinks)


def relu_signature(model: nn.Module) -> Callable[[], torch.Tensor]:
    """Hook every ReLU; the returned callable gives the sign pattern of the last forward pass."""
    record: list[torch.Tensor] = []

    def hook(_module, inputs, _output):
        record.append((inputs[0] > 0).flatten())

    for module in model.modules():
        if isinstance(module, nn.ReLU):
            module.register_forward_hook(hook)

    def read() -> torch.Tensor:
        out = torch.cat(record) if record else torch.zeros(0, dtype=torch.bool)
        record.clear()
        return out

    return read


def grad_check(model: Composer, batch: Batch, cfg: TrainConfig, n_coords: int = 200,
               step: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Finite-difference check of the full multitask loss at 64-bit.

    Dropout is off and the cluster codes are computed once and then held fixed,
    matching the stop-gradient the training step applies to them.
    """
    model = copy.deepcopy(model).double().eval()
    batch = Batch(**{k: (v.double() if v.is_floating_point() else v) for k, v in vars(batch).items()})
    codes = total_loss(model, model(batch), batch, cfg).codes or None
    signature = relu_signature(model)

    def loss_fn():
        signature()  # drop the pattern of any earlier pass
        return total_loss(model, model(batch), batch, cfg, codes=codes).total

    params = dict(model.named_parameters())
    return grad_check_fn(loss_fn, params, n_coords, step, seed, signature=signature)


def step_sweep(model: Composer, batch: Batch, cfg: TrainConfig, steps=(1e-4, 1e-5, 1e-6),
               n_coords: int = 50, seed: int = 0) -> dict[float, float]:
    """Median relative error per finite-difference step on the same coordinates."""
    return {h: float(np.median([e["rel_error"] for e in
                                grad_check(model, batch, cfg, n_coords, h, seed).entries]))
            for h in steps}

