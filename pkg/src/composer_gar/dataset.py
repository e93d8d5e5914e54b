"""Keypoint-track clips: file format, feature standardization, OKS and grouping.

Clips are stored as NDJSON (one clip per line) next to a ``manifest.json``
describing the dimensions shared by every clip::

    {"clip_id": "c0", "width": 1280, "height": 720, "T": 10, "group_label": 2,
     "persons": [{"actions": 1, "kpts": [[[x, y, conf], ...j'], ...T]}, ...],
     "objects": [{"kpts": [[x, y], ...T]}]}

A person keypoint with ``conf <= 0`` is missing; its coordinates are stored
as (0, 0). An object keypoint given as ``null`` is missing.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# COCO-17 ordering. One row per keypoint type:
#   (name, OKS falloff constant kappa, index of the mirrored type)
KEYPOINT_TABLE: tuple[tuple[str, float, int], ...] = (
    ("nose", 0.026, 0),
    ("left_eye", 0.025, 2),
    ("right_eye", 0.025, 1),
    ("left_ear", 0.035, 4),
    ("right_ear", 0.035, 3),
    ("left_shoulder", 0.079, 6),
    ("right_shoulder", 0.079, 5),
    ("left_elbow", 0.072, 8),
    ("right_elbow", 0.072, 7),
    ("left_wrist", 0.062, 10),
    ("right_wrist", 0.062, 9),
    ("left_hip", 0.107, 12),
    ("right_hip", 0.107, 11),
    ("left_knee", 0.087, 14),
    ("right_knee", 0.087, 13),
    ("left_ankle", 0.089, 16),
    ("right_ankle", 0.089, 15),
)
COCO_KEYPOINTS = tuple(row[0] for row in KEYPOINT_TABLE)
COCO_KAPPAS = np.array([row[1] for row in KEYPOINT_TABLE])
COCO_FLIP = tuple(row[2] for row in KEYPOINT_TABLE)
COCO_EDGES = (
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12),
    (5, 6), (5, 7), (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2),
    (1, 3), (2, 4), (3, 5), (4, 6),
)
DEFAULT_KAPPA = float(COCO_KAPPAS.mean())


class DatasetError(ValueError):
    """Raised for malformed dataset or manifest files."""


@dataclass
class Manifest:
    num_keypoint_types: int
    max_persons: int
    max_objects: int
    num_groups: int
    class_names: list[str]
    action_names: list[str] = field(default_factory=list)
    keypoint_names: list[str] = field(default_factory=lambda: list(COCO_KEYPOINTS))
    label_flip: list[int] | None = None
    T: int | None = None

    def __post_init__(self):
        if len(self.keypoint_names) != self.num_keypoint_types:
            raise DatasetError(
                f"manifest: keypoint_names has {len(self.keypoint_names)} entries, "
                f"num_keypoint_types is {self.num_keypoint_types}")
        if self.label_flip is None:
            self.label_flip = list(range(len(self.class_names)))
        if sorted(self.label_flip) != list(range(len(self.class_names))):
            raise DatasetError("manifest: label_flip must be a permutation of class indices")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_actions(self) -> int:
        return max(len(self.action_names), 1)

    def kappas(self) -> np.ndarray:
        lookup = dict(zip(COCO_KEYPOINTS, COCO_KAPPAS))
        return np.array([lookup.get(n, DEFAULT_KAPPA) for n in self.keypoint_names])

    def keypoint_flip(self) -> list[int]:
        """Index of the mirrored keypoint type for every type (identity if unpaired)."""
        index = {n: i for i, n in enumerate(self.keypoint_names)}
        out = []
        for i, name in enumerate(self.keypoint_names):
            if name.startswith("left_"):
                out.append(index.get("right_" + name[5:], i))
            elif name.startswith("right_"):
                out.append(index.get("left_" + name[6:], i))
            else:
                out.append(i)
        return out

    def to_json(self) -> dict:
        return {
            "num_keypoint_types": self.num_keypoint_types,
            "max_persons": self.max_persons,
            "max_objects": self.max_objects,
            "num_groups": self.num_groups,
            "class_names": list(self.class_names),
            "action_names": list(self.action_names),
            "keypoint_names": list(self.keypoint_names),
            "label_flip": list(self.label_flip),
            "T": self.T,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Manifest":
        required = ("num_keypoint_types", "max_persons", "max_objects", "num_groups", "class_names")
        for key in required:
            if key not in obj:
                raise DatasetError(f"manifest: missing field '{key}'")
        return cls(
            num_keypoint_types=int(obj["num_keypoint_types"]),
            max_persons=int(obj["max_persons"]),
            max_objects=int(obj["max_objects"]),
            num_groups=int(obj["num_groups"]),
            class_names=list(obj["class_names"]),
            action_names=list(obj.get("action_names", [])),
            keypoint_names=list(obj.get("keypoint_names", COCO_KEYPOINTS)),
            label_flip=obj.get("label_flip"),
            T=obj.get("T"),
        )


def side_flip_table(class_names: Sequence[str]) -> list[int]:
    """Pair class names that differ only in a left/right marker.

    Recognises ``left``/``right`` words and ``l``/``r`` prefixes such as
    ``l-pass``/``r_pass``. Unpaired names map to themselves.
    """
    def key(name: str):
        low = name.lower()
        for a, b in (("left", "right"), ("right", "left")):
            if a in low:
                return low.replace(a, "\0"), a
        for sep in ("_", "-"):
            if low.startswith("l" + sep) or low.startswith("r" + sep):
                return "\0" + sep + low[2:], low[0]
        return None, None

    keyed = [key(n) for n in class_names]
    table = list(range(len(class_names)))
    for i, (stem, side) in enumerate(keyed):
        if stem is None:
            continue
        for j, (stem2, side2) in enumerate(keyed):
            if j != i and stem2 is not None and side2 != side and _norm_stem(stem) == _norm_stem(stem2):
                table[i] = j
                break
    return table


def _norm_stem(stem: str) -> str:
    return stem.replace("-", "_")


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest {path}: invalid JSON ({exc})") from exc
    return Manifest.from_json(obj)


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2) + "\n")


@dataclass
class PersonTrack:
    person_index: int
    keypoints: np.ndarray    # (T, J, 2) pixels; (0, 0) where missing
    confidences: np.ndarray  # (T, J) in [0, 1]; 0 where missing
    action: int | None = None

    @property
    def visible(self) -> np.ndarray:
        return self.confidences > 0

    @property
    def present_mask(self) -> np.ndarray:
        return self.visible.any(axis=1)


@dataclass
class ObjectTrack:
    object_index: int
    keypoints: np.ndarray  # (T, 2)
    present_mask: np.ndarray  # (T,)


@dataclass
class RawClip:
    clip_id: str
    width: int
    height: int
    T: int
    persons: list[PersonTrack]
    objects: list[ObjectTrack]
    group_label: int

    @property
    def person_actions(self) -> list[int | None]:
        return [p.action for p in self.persons]

    def validate(self, manifest: Manifest | None = None) -> None:
        J = manifest.num_keypoint_types if manifest else None
        for p in self.persons:
            if p.keypoints.shape[0] != self.T:
                raise DatasetError(
                    f"clip {self.clip_id}: person {p.person_index} has "
                    f"{p.keypoints.shape[0]} frames, expected T={self.T}")
            if J is not None and p.keypoints.shape[1] != J:
                raise DatasetError(
                    f"clip {self.clip_id}: person {p.person_index} has "
                    f"{p.keypoints.shape[1]} keypoints per frame, expected {J}")
            _check_bounds(self, p.keypoints[p.visible], f"person {p.person_index}")
        for o in self.objects:
            if o.keypoints.shape[0] != self.T:
                raise DatasetError(
                    f"clip {self.clip_id}: object {o.object_index} has "
                    f"{o.keypoints.shape[0]} frames, expected T={self.T}")
            _check_bounds(self, o.keypoints[o.present_mask], f"object {o.object_index}")
        if manifest is not None:
            if len(self.persons) > manifest.max_persons:
                raise DatasetError(
                    f"clip {self.clip_id}: {len(self.persons)} persons exceeds "
                    f"max_persons={manifest.max_persons}")
            if len(self.objects) > manifest.max_objects:
                raise DatasetError(
                    f"clip {self.clip_id}: {len(self.objects)} objects exceeds "
                    f"max_objects={manifest.max_objects}")
            if not 0 <= self.group_label < manifest.num_classes:
                raise DatasetError(f"clip {self.clip_id}: group_label {self.group_label} out of range")
            if manifest.T is not None and self.T != manifest.T:
                raise DatasetError(f"clip {self.clip_id}: T={self.T}, manifest declares T={manifest.T}")


def _check_bounds(clip: RawClip, pts: np.ndarray, who: str) -> None:
    if pts.size == 0:
        return
    x, y = pts[:, 0], pts[:, 1]
    if x.min() < 0 or x.max() > clip.width or y.min() < 0 or y.max() > clip.height:
        raise DatasetError(
            f"clip {clip.clip_id}: {who} has keypoints outside the "
            f"{clip.width}x{clip.height} frame")


# ---------------------------------------------------------------- NDJSON I/O

def _require(obj: dict, key: str, kind, where: str):
    if key not in obj:
        raise DatasetError(f"{where}: missing field '{key}'")
    value = obj[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise DatasetError(f"{where}: field '{key}' must be an integer")
    if kind is str and not isinstance(value, str):
        raise DatasetError(f"{where}: field '{key}' must be a string")
    if kind is list and not isinstance(value, list):
        raise DatasetError(f"{where}: field '{key}' must be a list")
    return value


def clip_from_json(obj: dict, where: str = "clip") -> RawClip:
    if not isinstance(obj, dict):
        raise DatasetError(f"{where}: expected a JSON object")
    clip_id = _require(obj, "clip_id", str, where)
    where = f"{where} ({clip_id})"
    width = _require(obj, "width", int, where)
    height = _require(obj, "height", int, where)
    T = _require(obj, "T", int, where)
    label = _require(obj, "group_label", int, where)
    persons_raw = _require(obj, "persons", list, where)
    objects_raw = obj.get("objects", [])
    if not isinstance(objects_raw, list):
        raise DatasetError(f"{where}: field 'objects' must be a list")

    persons = []
    for i, p in enumerate(persons_raw):
        pw = f"{where}: person {i}"
        kpts = _require(p, "kpts", list, pw)
        if len(kpts) != T:
            raise DatasetError(f"{pw} has {len(kpts)} frames, expected T={T}")
        try:
            arr = np.asarray(kpts, dtype=np.float64)
        except ValueError as exc:
            raise DatasetError(f"{pw}: ragged 'kpts' (inconsistent keypoint counts)") from exc
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise DatasetError(f"{pw}: 'kpts' must be T x j' x [x, y, conf]")
        conf = arr[:, :, 2].copy()
        conf[conf < 0] = 0.0
        xy = arr[:, :, :2].copy()
        xy[conf <= 0] = 0.0
        action = p.get("actions")
        if action is not None and (isinstance(action, bool) or not isinstance(action, int)):
            raise DatasetError(f"{pw}: field 'actions' must be an integer or null")
        persons.append(PersonTrack(i, xy, conf, action))
    J = {p.keypoints.shape[1] for p in persons}
    if len(J) > 1:
        raise DatasetError(f"{where}: persons disagree on keypoint count {sorted(J)}")

    objects = []
    for i, o in enumerate(objects_raw):
        ow = f"{where}: object {i}"
        kpts = _require(o, "kpts", list, ow)
        if len(kpts) != T:
            raise DatasetError(f"{ow} has {len(kpts)} frames, expected T={T}")
        present = np.array([k is not None for k in kpts], dtype=bool)
        xy = np.zeros((T, 2))
        for t, k in enumerate(kpts):
            if k is not None:
                if len(k) != 2:
                    raise DatasetError(f"{ow}: frame {t} must be [x, y] or null")
                xy[t] = k
        objects.append(ObjectTrack(i, xy, present))
    return RawClip(clip_id, width, height, T, persons, objects, label)


def _num(v: float):
    # integral floats are written as ints so generated files stay compact;
    # the loader reads both as float64, which keeps round trips exact
    f = float(v)
    return int(f) if f.is_integer() and abs(f) < 2**53 else f


def clip_to_json(clip: RawClip) -> dict:
    persons = []
    for p in clip.persons:
        kpts = [[[_num(p.keypoints[t, j, 0]), _num(p.keypoints[t, j, 1]), _num(p.confidences[t, j])]
                 for j in range(p.keypoints.shape[1])] for t in range(clip.T)]
        persons.append({"actions": p.action, "kpts": kpts})
    objects = []
    for o in clip.objects:
        kpts = [[_num(o.keypoints[t, 0]), _num(o.keypoints[t, 1])] if o.present_mask[t] else None
                for t in range(clip.T)]
        objects.append({"kpts": kpts})
    return {"clip_id": clip.clip_id, "width": clip.width, "height": clip.height, "T": clip.T,
            "group_label": clip.group_label, "persons": persons, "objects": objects}


def manifest_path_for(path: str | Path) -> Path:
    return Path(path).with_name("manifest.json")


def load_dataset(path: str | Path, manifest: Manifest | None = None) -> list[RawClip]:
    """Read an NDJSON clip file; the sibling ``manifest.json`` is used when present."""
    path = Path(path)
    if manifest is None and manifest_path_for(path).exists():
        manifest = load_manifest(manifest_path_for(path))
    clips = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: parse error: {exc.msg}") from exc
            try:
                clip = clip_from_json(obj, where=f"{path.name}:{lineno}")
                clip.validate(manifest)
            except DatasetError as exc:
                msg = str(exc)
                if not msg.startswith(path.name):
                    msg = f"{path.name}:{lineno}: {msg}"
                raise DatasetError(msg) from None
            clips.append(clip)
    return clips


def dumps_dataset(clips: Iterable[RawClip]) -> str:
    return "".join(json.dumps(clip_to_json(c), separators=(",", ":")) + "\n" for c in clips)


def save_dataset(clips: Iterable[RawClip], path: str | Path, manifest: Manifest | None = None) -> None:
    path = Path(path)
    path.write_text(dumps_dataset(clips))
    if manifest is not None:
        save_manifest(manifest, manifest_path_for(path))


# ----------------------------------------------------------- standardization

@dataclass
class FeatureStats:
    coord_mean: np.ndarray  # (2,)
    coord_std: np.ndarray
    diff_mean: np.ndarray
    diff_std: np.ndarray

    def to_json(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)]
                for k in ("coord_mean", "coord_std", "diff_mean", "diff_std")}

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureStats":
        return cls(*(np.asarray(obj[k], dtype=np.float64)
                     for k in ("coord_mean", "coord_std", "diff_mean", "diff_std")))


def temporal_diff(coords: np.ndarray, visible: np.ndarray | None = None) -> np.ndarray:
    """Frame-to-frame differences; 0 at frame 0 and wherever either endpoint is missing."""
    diff = np.zeros_like(coords)
    diff[1:] = coords[1:] - coords[:-1]
    if visible is not None:
        ok = np.zeros(visible.shape, dtype=bool)
        ok[1:] = visible[1:] & visible[:-1]
        diff[~ok] = 0.0
    return diff


def compute_stats(clips: Sequence[RawClip]) -> FeatureStats:
    """Mean/std per coordinate channel over present person keypoints (training split only)."""
    coords, diffs = [], []
    for clip in clips:
        for p in clip.persons:
            vis = p.visible
            coords.append(p.keypoints[vis])
            d = temporal_diff(p.keypoints, vis)
            ok = np.zeros_like(vis)
            ok[1:] = vis[1:] & vis[:-1]
            diffs.append(d[ok])
    c = np.concatenate(coords) if coords else np.zeros((0, 2))
    d = np.concatenate(diffs) if diffs else np.zeros((0, 2))

    def moments(a):
        if len(a) == 0:
            return np.zeros(2), np.ones(2)
        return a.mean(axis=0), a.std(axis=0)

    cm, cs = moments(c)
    dm, ds = moments(d)
    return FeatureStats(cm, cs, dm, ds)


def _safe_std(std: np.ndarray, what: str) -> np.ndarray:
    std = np.asarray(std, dtype=np.float64)
    if np.any(std == 0):
        warnings.warn(f"zero std in {what} channel; using divisor 1", RuntimeWarning, stacklevel=3)
        std = np.where(std == 0, 1.0, std)
    return std


def standardize_features(coords: np.ndarray, stats: FeatureStats,
                         visible: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Standardize coordinates (T, J, 2) and their temporal differences.

    Missing keypoints (``visible`` False) come out as 0 in both outputs, as
    does the difference at frame 0.
    """
    coords = np.asarray(coords, dtype=np.float64)
    std = (coords - stats.coord_mean) / _safe_std(stats.coord_std, "coordinate")
    diff = (temporal_diff(coords, visible) - stats.diff_mean) / _safe_std(stats.diff_std, "difference")
    diff[0] = 0.0
    if visible is not None:
        std[~visible] = 0.0
        ok = np.zeros(visible.shape, dtype=bool)
        ok[1:] = visible[1:] & visible[:-1]
        diff[~ok] = 0.0
    return std, diff


def _bbox(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return pts.min(axis=0), pts.max(axis=0)


def personwise_normalize(track: PersonTrack) -> np.ndarray:
    """Center on the person's bounding box and divide by its diagonal (floored at 1 px)."""
    vis = track.visible
    if not vis.any():
        raise ValueError(f"person {track.person_index} has no present keypoints")
    lo, hi = _bbox(track.keypoints[vis])
    center = (lo + hi) / 2.0
    diag = max(float(np.hypot(*(hi - lo))), 1.0)
    out = (track.keypoints - center) / diag
    out[~vis] = 0.0
    return out


def compute_oks_features(track: PersonTrack, kappas: np.ndarray | None = None) -> np.ndarray:
    """Mean temporal OKS per keypoint type between consecutive frames.

    OKS(t) = exp(-d^2 / (2 s^2 kappa^2)), where s^2 is the area of the
    person's box at frame t. Pairs with a missing endpoint are skipped; a type
    with no valid pair scores 0.
    """
    T, J, _ = track.keypoints.shape
    if T < 2:
        raise ValueError("OKS features need at least two frames")
    kappas = COCO_KAPPAS if kappas is None else np.asarray(kappas)
    vis = track.visible
    total = np.zeros(J)
    count = np.zeros(J)
    for t in range(T - 1):
        if not vis[t].any():
            continue
        lo, hi = _bbox(track.keypoints[t][vis[t]])
        area = max(float(np.prod(hi - lo)), 1.0)
        ok = vis[t] & vis[t + 1]
        d2 = ((track.keypoints[t + 1] - track.keypoints[t]) ** 2).sum(axis=1)
        oks = np.exp(-d2 / (2.0 * area * kappas ** 2))
        total[ok] += oks[ok]
        count[ok] += 1
    return np.divide(total, count, out=np.zeros(J), where=count > 0)


# ------------------------------------------------------------------ grouping

@dataclass
class GroupAssignment:
    mapping: np.ndarray  # (p',) group index per person slot
    method: str          # "heuristic" | "kmeans"
    order: np.ndarray | None = None  # person slots sorted by mean x (heuristic only)

    @property
    def num_groups(self) -> int:
        return int(self.mapping.max()) + 1 if len(self.mapping) else 0

    def members(self, g: int) -> list[int]:
        if self.order is not None:
            return [int(i) for i in self.order if self.mapping[i] == g]
        return [int(i) for i in np.flatnonzero(self.mapping == g)]


def mean_x(track: PersonTrack) -> float:
    vis = track.visible
    return float(track.keypoints[..., 0][vis].mean()) if vis.any() else math.inf


def assign_groups_heuristic(clip: RawClip, num_persons: int | None = None) -> GroupAssignment:
    """Split persons into a left and a right group by mean x.

    ``num_persons`` pads the slot count (absent slots sort last).
    """
    n = num_persons if num_persons is not None else len(clip.persons)
    xs = [mean_x(p) for p in clip.persons] + [math.inf] * (n - len(clip.persons))
    order = np.array(sorted(range(n), key=lambda i: (xs[i], i)), dtype=np.int64)
    mapping = np.ones(n, dtype=np.int64)
    mapping[order[: math.ceil(n / 2)]] = 0
    return GroupAssignment(mapping, "heuristic", order)


def assign_groups_kmeans(person_reprs: np.ndarray, num_groups: int, seed: int = 0,
                         max_iter: int = 100) -> GroupAssignment:
    """Lloyd's k-means with k-means++ seeding; deterministic for a given seed."""
    X = np.asarray(person_reprs, dtype=np.float64)
    n = len(X)
    if n < num_groups:
        raise ValueError(f"need at least {num_groups} persons, got {n}")
    rng = np.random.default_rng(seed)

    centers = np.empty((num_groups, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    for k in range(1, num_groups):
        d2 = ((X[:, None, :] - centers[None, :k]) ** 2).sum(-1).min(axis=1)
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[k] = X[idx]

    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None]) ** 2).sum(-1)
        new = d2.argmin(axis=1)
        new = _repair_empty(X, new, centers, num_groups)
        if np.array_equal(new, labels):
            break
        labels = new
        for k in range(num_groups):
            centers[k] = X[labels == k].mean(axis=0)
    return GroupAssignment(labels, "kmeans")


def _repair_empty(X, labels, centers, k):
    labels = labels.copy()
    for g in range(k):
        if np.any(labels == g):
            continue
        counts = np.bincount(labels, minlength=k)
        dist = ((X - centers[labels]) ** 2).sum(-1)
        # only steal from clusters that keep at least one member
        dist[counts[labels] <= 1] = -1.0
        labels[int(np.argmax(dist))] = g
    return labels
