"""Synthetic group-activity clips with signal at several scales.

Every clip has a designated actor standing still with the ball at their
feet; everyone else ends the clip standing around them.

* ``*-converge``: the others walk in from random directions.
* ``*-raise``: the others stand in place and the designated actor raises
  both wrists.
* ``left-``/``right-``: the half of the frame the group ends up in.

In half of the converge clips the designated actor raises too, so the raise
alone decides only some clips. Approach directions are uniform, so every
coordinate has the same mean in both classes and a linear read-out of raw
coordinates cannot see how far anyone walked.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

from .dataset import COCO_FLIP, COCO_KEYPOINTS, Manifest, ObjectTrack, PersonTrack, RawClip

CLASS_FAMILY = ("left-converge", "right-converge", "left-raise", "right-raise")
ACTIONS = ("background", "key")
WIDTH, HEIGHT = 1280, 720
GRID = 256.0  # coordinates are quantized to 1/256 px so reflections stay exact

# standing pose, units of body height, y grows downward, origin at mid-torso
POSE = np.array([
    (0.0, -0.42), (0.03, -0.45), (-0.03, -0.45), (0.06, -0.43), (-0.06, -0.43),
    (0.12, -0.30), (-0.12, -0.30), (0.15, -0.12), (-0.15, -0.12),
    (0.16, 0.02), (-0.16, 0.02), (0.08, 0.05), (-0.08, 0.05),
    (0.09, 0.27), (-0.09, 0.27), (0.09, 0.48), (-0.09, 0.48),
])
RAISED = {9: (0.14, -0.95), 10: (-0.14, -0.95), 7: (0.16, -0.62), 8: (-0.16, -0.62)}
ARMS = {"left": (7, 9), "right": (8, 10)}
X_RANGE = (0.05 * WIDTH, 0.45 * WIDTH)
Y_RANGE = (250.0, 500.0)
RING = (70.0, 130.0)
APPROACH = (150.0, 260.0)


@dataclass
class SynthConfig:
    n_clips: int = 400
    T: int = 10
    persons: int = 6
    keypoints: int = 17
    classes: tuple[str, ...] = CLASS_FAMILY
    noise_px: float = 2.0
    seed: int = 0


def make_manifest(cfg: SynthConfig) -> Manifest:
    names = list(cfg.classes)
    flip = [names.index(_mirror(n)) if _mirror(n) in names else i for i, n in enumerate(names)]
    return Manifest(num_keypoint_types=cfg.keypoints, max_persons=cfg.persons, max_objects=1,
                    num_groups=2, class_names=names, action_names=list(ACTIONS),
                    keypoint_names=list(COCO_KEYPOINTS), label_flip=flip, T=cfg.T)


def _mirror(name: str) -> str:
    side, rest = name.split("-", 1)
    return ("right-" if side == "left" else "left-") + rest


def _quantize(a: np.ndarray) -> np.ndarray:
    return np.round(a * GRID) / GRID


def _person(rng: np.random.Generator, center0, center1, height: float, T: int,
            arms: tuple[str, ...] = ()) -> np.ndarray:
    """(T, 17, 2) keypoints moving linearly from center0 to center1, raising the named arms."""
    s = np.linspace(0.0, 1.0, T)
    centers = (1 - s)[:, None] * np.asarray(center0) + s[:, None] * np.asarray(center1)
    pose = np.repeat(POSE[None], T, axis=0).copy()
    for arm in arms:
        for j in ARMS[arm]:
            pose[:, j] = (1 - s)[:, None] * POSE[j] + s[:, None] * np.asarray(RAISED[j])
    sway = rng.normal(0.0, 0.004, size=pose.shape)
    return centers[:, None, :] + (pose + sway) * height


def _approach(rng: np.random.Generator, end: np.ndarray) -> np.ndarray:
    """Start of a walk ending at ``end``, from a uniformly random direction."""
    while True:
        angle = rng.uniform(0, 2 * np.pi)
        start = end + rng.uniform(*APPROACH) * np.array([np.cos(angle), np.sin(angle)])
        if 20 <= start[0] <= WIDTH - 20 and 80 <= start[1] <= HEIGHT - 80:
            return start


def _half_point(rng: np.random.Generator) -> np.ndarray:
    return np.array([rng.uniform(*X_RANGE), rng.uniform(*Y_RANGE)])


def _left_layout(rng: np.random.Generator, cfg: SynthConfig, raise_class: bool, holder_raises: bool,
                 slots: np.ndarray):
    """Keypoints and ball for a left-side clip; right-side clips are its mirror image."""
    P, T = cfg.persons, cfg.T
    holder, others = int(slots[0]), [int(s) for s in slots[1:]]
    heights = rng.uniform(90, 130, size=P)
    spot = _half_point(rng)
    kpts = np.zeros((P, T, len(POSE), 2))
    arms = ("left", "right") if holder_raises else ()
    kpts[holder] = _person(rng, spot, spot, heights[holder], T, arms)
    for p in others:
        angle = rng.uniform(0, 2 * np.pi)
        end = spot + rng.uniform(*RING) * np.array([np.cos(angle), np.sin(angle)])
        start = end if raise_class else _approach(rng, end)
        kpts[p] = _person(rng, start, end, heights[p], T)
    ball = spot + np.array([rng.uniform(-20, 20), 0.5 * heights[holder] + 5])
    return kpts, np.repeat(ball[None], T, axis=0)


def generate_clip(cfg: SynthConfig, index: int, label: int) -> RawClip:
    rng = np.random.default_rng([cfg.seed, index])
    name = cfg.classes[label]
    P, T = cfg.persons, cfg.T
    slots = rng.permutation(P)
    holder = int(slots[0])
    raise_class = name.endswith("raise")
    # converge clips alternate between a raising and an idle designated actor
    holder_raises = raise_class or (index // len(cfg.classes)) % 2 == 1
    kpts, ball = _left_layout(rng, cfg, raise_class, holder_raises, slots)
    if name.startswith("right"):
        kpts = kpts[:, :, COCO_FLIP]
        kpts[..., 0] = WIDTH - kpts[..., 0]
        ball[:, 0] = WIDTH - ball[:, 0]

    if cfg.noise_px > 0:
        kpts = kpts + rng.normal(0.0, cfg.noise_px, size=kpts.shape)
        ball = ball + rng.normal(0.0, cfg.noise_px, size=ball.shape)
    bounds = np.array([WIDTH, HEIGHT])
    kpts = _quantize(np.clip(kpts, 0, bounds))
    ball = _quantize(np.clip(ball, 0, bounds))

    persons = [PersonTrack(p, kpts[p], np.ones((T, len(POSE))), 1 if p == holder else 0) for p in range(P)]
    objects = [ObjectTrack(0, ball, np.ones(T, dtype=bool))]
    return RawClip(f"synth-{cfg.seed}-{index:05d}", WIDTH, HEIGHT, T, persons, objects, label)


def generate_dataset(cfg: SynthConfig) -> tuple[list[RawClip], Manifest]:
    """Balanced clips (label = index mod number of classes), deterministic in ``cfg.seed``."""
    if cfg.persons < 2:
        raise ValueError("synthetic clips need at least 2 persons")
    if cfg.keypoints != len(POSE):
        raise ValueError("synthetic clips use the 17-keypoint COCO skeleton")
    for c in cfg.classes:
        if c not in CLASS_FAMILY:
            raise ValueError(f"unknown synthetic class {c!r}; choose from {CLASS_FAMILY}")
    n = len(cfg.classes)
    clips = [generate_clip(cfg, i, i % n) for i in range(cfg.n_clips)]
    return clips, make_manifest(cfg)


def stratified_split(clips: list[RawClip], test_fraction: float = 0.2, seed: int = 0):
    """Per-class random split; returns (train, test) preserving input order within each."""
    rng = random.Random(seed)
    by_label: dict[int, list[int]] = {}
    for i, c in enumerate(clips):
        by_label.setdefault(c.group_label, []).append(i)
    test = set()
    for idx in by_label.values():
        k = round(len(idx) * test_fraction)
        test.update(rng.sample(idx, k))
    return ([c for i, c in enumerate(clips) if i not in test],
            [c for i, c in enumerate(clips) if i in test])
