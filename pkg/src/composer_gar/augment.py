"""Keypoint-space training augmentations.

Flip and the two moves act on ``RawClip`` pixel coordinates; actor dropout
acts on featurized clips. All functions return new objects.
"""
from __future__ import annotations

import zlib
from dataclasses import replace

import numpy as np

from .config import AugConfig
from .dataset import Manifest, ObjectTrack, PersonTrack, RawClip
from .features import ClipFeatures, drop_person_frame


def clip_rng(seed: int, clip_id: str, epoch: int = 0) -> np.random.Generator:
    """Per-clip random stream derived from (seed, epoch, clip_id)."""
    return np.random.default_rng([seed, epoch, zlib.crc32(clip_id.encode())])


def _perturb(rng: np.random.Generator, shape, perturb: float) -> np.ndarray:
    if perturb <= 0:
        return np.zeros(shape)
    return rng.uniform(-perturb, perturb, size=shape)


def _map_coords(clip: RawClip, fn) -> RawClip:
    """Apply ``fn(xy, visible) -> xy`` to every person and object track."""
    persons = []
    for p in clip.persons:
        xy = fn(p.keypoints, p.visible)
        persons.append(PersonTrack(p.person_index, np.where(p.visible[..., None], xy, 0.0),
                                   p.confidences.copy(), p.action))
    objects = []
    for o in clip.objects:
        xy = fn(o.keypoints, o.present_mask)
        objects.append(ObjectTrack(o.object_index, np.where(o.present_mask[:, None], xy, 0.0),
                                   o.present_mask.copy()))
    return replace(clip, persons=persons, objects=objects)


def horizontal_flip(clip: RawClip, rng: np.random.Generator, perturb: float,
                    manifest: Manifest) -> RawClip:
    """Mirror x about the frame, swap left/right keypoint types and remap the label."""
    swap = manifest.keypoint_flip()

    def fn(xy, visible):
        out = xy.copy()
        out[..., 0] = clip.width - out[..., 0]
        return out + _perturb(rng, out.shape, perturb)

    flipped = _map_coords(clip, fn)
    for p in flipped.persons:
        p.keypoints = p.keypoints[:, swap]
        p.confidences = p.confidences[:, swap]
    return replace(flipped, group_label=manifest.label_flip[clip.group_label])


def _move(clip: RawClip, rng: np.random.Generator, bound: int, perturb: float, axis: int) -> RawClip:
    delta = float(rng.integers(-bound, bound + 1)) if bound > 0 else 0.0

    def fn(xy, visible):
        out = xy.copy()
        out[..., axis] += delta
        return out + _perturb(rng, out.shape, perturb)

    return _map_coords(clip, fn)


def horizontal_move(clip: RawClip, rng: np.random.Generator, bound: int = 10,
                    perturb: float = 1.0) -> RawClip:
    return _move(clip, rng, bound, perturb, axis=0)


def vertical_move(clip: RawClip, rng: np.random.Generator, bound: int = 10,
                  perturb: float = 1.0) -> RawClip:
    return _move(clip, rng, bound, perturb, axis=1)


def actor_dropout(features: ClipFeatures, rng: np.random.Generator) -> ClipFeatures:
    """Zero one uniformly chosen (person, frame) pair among present persons."""
    candidates = np.argwhere(features.frame_keep > 0)
    if len(candidates) == 0:
        raise ValueError("actor dropout needs at least one present person")
    person, frame = candidates[rng.integers(len(candidates))]
    return drop_person_frame(features, int(person), int(frame))


def augment_clip(clip: RawClip, rng: np.random.Generator, cfg: AugConfig,
                 manifest: Manifest) -> RawClip:
    """Coordinate-space augmentations, each gated by its own coin flip."""
    if cfg.flip and rng.random() < cfg.flip_p:
        clip = horizontal_flip(clip, rng, cfg.perturb_px, manifest)
    if cfg.hmove and rng.random() < cfg.move_p:
        clip = horizontal_move(clip, rng, cfg.move_bound, cfg.perturb_px)
    if cfg.vmove and rng.random() < cfg.move_p:
        clip = vertical_move(clip, rng, cfg.move_bound, cfg.perturb_px)
    return clip


def augment_features(features: ClipFeatures, rng: np.random.Generator, cfg: AugConfig) -> ClipFeatures:
    if cfg.dropout and rng.random() < cfg.dropout_p and features.frame_keep.any():
        features = actor_dropout(features, rng)
    return features
