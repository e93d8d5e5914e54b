import numpy as np
import pytest
import torch

from composer_gar import config, synth
from composer_gar.dataset import Manifest, ObjectTrack, PersonTrack, RawClip, compute_stats


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def tiny_config(**overrides) -> config.TrainConfig:
    """Desk preset shrunk for fast unit tests."""
    cfg = config.desk()
    cfg.model.d, cfg.model.d_mlp = 16, 32
    cfg.model.d_type = cfg.model.d_fourier = cfg.model.d_time = 4
    cfg.model.heads = (2, 2, 2, 2)
    cfg.cluster.K = 8
    for key, value in overrides.items():
        config.set_key(cfg, key, str(value))
    return cfg.validate()


@pytest.fixture
def small_synth():
    clips, manifest = synth.generate_dataset(synth.SynthConfig(n_clips=8, T=4, persons=4, seed=3))
    return clips, manifest, compute_stats(clips)


def make_person(index, xy, conf=None, action=None):
    xy = np.asarray(xy, dtype=np.float64)
    conf = np.ones(xy.shape[:2]) if conf is None else np.asarray(conf, dtype=np.float64)
    return PersonTrack(index, xy, conf, action)


def make_clip(persons, objects=(), label=0, width=1280, height=720, clip_id="c0"):
    T = persons[0].keypoints.shape[0] if persons else objects[0].keypoints.shape[0]
    return RawClip(clip_id, width, height, T, list(persons), list(objects), label)


def make_object(index, xy, present=None):
    xy = np.asarray(xy, dtype=np.float64)
    present = np.ones(len(xy), dtype=bool) if present is None else np.asarray(present)
    return ObjectTrack(index, xy, present)


def toy_manifest(P=2, J=17, E=1, classes=("a", "b")):
    return Manifest(num_keypoint_types=J, max_persons=P, max_objects=E, num_groups=2,
                    class_names=list(classes), action_names=["background", "key"])
