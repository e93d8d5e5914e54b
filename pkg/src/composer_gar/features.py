"""Per-clip numeric features and batching into tensors."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np
import torch

from .dataset import (FeatureStats, Manifest, RawClip, assign_groups_heuristic,
                      compute_oks_features, personwise_normalize, standardize_features)


@dataclass
class ClipFeatures:
    """Padded arrays for one clip. P, E are the manifest maxima."""
    kp_std: np.ndarray      # (P, T, J, 2) standardized coordinates
    kp_diff: np.ndarray     # (P, T, J, 2) standardized temporal differences
    kp_norm: np.ndarray     # (P, T, J, 2) person-wise normalized coordinates
    kp_img: np.ndarray      # (P, T, J, 2) coordinates divided by frame size
    kp_mask: np.ndarray     # (P, T, J) 1 where the keypoint is present
    frame_keep: np.ndarray  # (P, T) 0 where actor dropout removed the person-frame
    oks: np.ndarray         # (P, J) mean temporal OKS per keypoint type
    person_mask: np.ndarray  # (P,)
    obj_std: np.ndarray     # (E, T, 2)
    obj_diff: np.ndarray
    obj_img: np.ndarray
    obj_mask: np.ndarray    # (E, T)
    group_members: np.ndarray  # (G, S) person slots per group, -1 padded
    group_label: int
    person_actions: np.ndarray  # (P,) -1 where unlabeled or absent


def heuristic_members(clip: RawClip, num_persons: int, num_groups: int) -> np.ndarray:
    if num_groups != 2:
        raise ValueError("the left/right heuristic produces exactly 2 groups")
    assignment = assign_groups_heuristic(clip, num_persons)
    size = math.ceil(num_persons / 2)
    members = np.full((2, size), -1, dtype=np.int64)
    for g in range(2):
        m = assignment.members(g)
        members[g, : len(m)] = m
    return members


def featurize(clip: RawClip, manifest: Manifest, stats: FeatureStats,
              grouping: str = "heuristic") -> ClipFeatures:
    P, E, J, T = manifest.max_persons, manifest.max_objects, manifest.num_keypoint_types, clip.T
    kappas = manifest.kappas()
    f = dict(
        kp_std=np.zeros((P, T, J, 2)), kp_diff=np.zeros((P, T, J, 2)),
        kp_norm=np.zeros((P, T, J, 2)), kp_img=np.zeros((P, T, J, 2)),
        kp_mask=np.zeros((P, T, J)), frame_keep=np.zeros((P, T)), oks=np.zeros((P, J)),
        person_mask=np.zeros(P), obj_std=np.zeros((E, T, 2)), obj_diff=np.zeros((E, T, 2)),
        obj_img=np.zeros((E, T, 2)), obj_mask=np.zeros((E, T)),
        person_actions=np.full(P, -1, dtype=np.int64),
    )
    scale = np.array([clip.width, clip.height], dtype=np.float64)
    for p in clip.persons:
        i = p.person_index
        vis = p.visible
        if not vis.any():
            continue
        f["kp_std"][i], f["kp_diff"][i] = standardize_features(p.keypoints, stats, vis)
        f["kp_norm"][i] = personwise_normalize(p)
        f["kp_img"][i] = np.where(vis[..., None], p.keypoints / scale, 0.0)
        f["kp_mask"][i] = vis
        f["frame_keep"][i] = 1.0
        f["oks"][i] = compute_oks_features(p, kappas) if T >= 2 else 0.0
        f["person_mask"][i] = 1.0
        if p.action is not None:
            f["person_actions"][i] = p.action
    for o in clip.objects[:E]:
        e = o.object_index
        vis = o.present_mask
        std, diff = standardize_features(o.keypoints[:, None, :], stats, vis[:, None])
        f["obj_std"][e], f["obj_diff"][e] = std[:, 0], diff[:, 0]
        f["obj_img"][e] = np.where(vis[:, None], o.keypoints / scale, 0.0)
        f["obj_mask"][e] = vis
    if grouping == "heuristic":
        members = heuristic_members(clip, P, manifest.num_groups)
    else:
        # filled per block by the model from learned person tokens
        members = np.full((manifest.num_groups, P), -1, dtype=np.int64)
    return ClipFeatures(group_members=members, group_label=clip.group_label, **f)


def raw_coordinates(clip: RawClip, manifest: Manifest) -> np.ndarray:
    """Flattened pixel coordinates of every person and object slot (zeros for padding)."""
    P, E, J = manifest.max_persons, manifest.max_objects, manifest.num_keypoint_types
    out = np.zeros((P * clip.T * J * 2 + E * clip.T * 2))
    persons = np.zeros((P, clip.T, J, 2))
    for p in clip.persons:
        persons[p.person_index] = p.keypoints
    objects = np.zeros((E, clip.T, 2))
    for o in clip.objects[:E]:
        objects[o.object_index] = o.keypoints
    out[: persons.size] = persons.ravel()
    out[persons.size:] = objects.ravel()
    return out


def drop_person_frame(features: ClipFeatures, person: int, frame: int) -> ClipFeatures:
    """Zero every per-frame input of one person at one frame."""
    out = replace(features)
    for name in ("kp_std", "kp_diff", "kp_norm", "kp_img", "kp_mask"):
        arr = getattr(features, name).copy()
        arr[person, frame] = 0.0
        setattr(out, name, arr)
    keep = features.frame_keep.copy()
    keep[person, frame] = 0.0
    out.frame_keep = keep
    return out


@dataclass
class Batch:
    kp_std: torch.Tensor
    kp_diff: torch.Tensor
    kp_norm: torch.Tensor
    kp_img: torch.Tensor
    kp_mask: torch.Tensor
    frame_keep: torch.Tensor
    oks: torch.Tensor
    person_mask: torch.Tensor
    obj_std: torch.Tensor
    obj_diff: torch.Tensor
    obj_img: torch.Tensor
    obj_mask: torch.Tensor
    group_members: torch.Tensor
    group_label: torch.Tensor
    person_actions: torch.Tensor

    def __len__(self) -> int:
        return self.group_label.shape[0]

    def select(self, idx) -> "Batch":
        return Batch(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})


_INT_FIELDS = {"group_members", "group_label", "person_actions"}


def collate(items: list[ClipFeatures], dtype: torch.dtype = torch.float32) -> Batch:
    out = {}
    for f in fields(Batch):
        arr = np.stack([np.asarray(getattr(it, f.name)) for it in items])
        if f.name in _INT_FIELDS:
            out[f.name] = torch.as_tensor(arr, dtype=torch.long)
        else:
            out[f.name] = torch.as_tensor(arr, dtype=dtype)
    return Batch(**out)

