"""Linear reference classifier on flattened raw coordinates."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .dataset import Manifest, RawClip
from .features import raw_coordinates


def design_matrix(clips: Sequence[RawClip], manifest: Manifest) -> np.ndarray:
    return np.nan_to_num(np.stack([raw_coordinates(c, manifest) for c in clips]))


@dataclass
class LinearBaseline:
    manifest: Manifest
    C: float = 1.0
    max_iter: int = 5000

    def fit(self, clips: Sequence[RawClip]) -> "LinearBaseline":
        y = np.array([c.group_label for c in clips])
        self.model_ = make_pipeline(StandardScaler(),
                                    LogisticRegression(C=self.C, max_iter=self.max_iter))
        self.model_.fit(design_matrix(clips, self.manifest), y)
        return self

    def predict(self, clips: Sequence[RawClip]) -> np.ndarray:
        return self.model_.predict(design_matrix(clips, self.manifest))

    def accuracy(self, clips: Sequence[RawClip]) -> float:
        y = np.array([c.group_label for c in clips])
        return float((self.predict(clips) == y).mean())


def majority_accuracy(train: Sequence[RawClip], test: Sequence[RawClip]) -> float:
    """Accuracy of always predicting the most frequent training label."""
    labels = np.array([c.group_label for c in train])
    top = np.bincount(labels).argmax()
    return float(np.mean([c.group_label == top for c in test]))
