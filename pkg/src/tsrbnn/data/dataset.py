"""In-memory labeled image datasets."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class Source(str, Enum):
    GTSRB = "GTSRB"
    BELGIAN = "BELGIAN"
    CHINESE = "CHINESE"
    OTHER = "OTHER"
    SYNTHETIC = "SYNTHETIC"


class DatasetError(ValueError):
    """Malformed dataset tree, annotation file or image."""


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # [1, S, S, 3] float32 in [0, 1]
    label: int
    source_path: str
    source_dataset: Source
    roi_applied: bool


@dataclass
class LabeledDataset:
    """Images ``[N, S, S, 3]`` in [0, 1] with integer labels and provenance."""

    images: np.ndarray
    labels: np.ndarray
    paths: list = field(default_factory=list)
    source: Source = Source.OTHER
    roi_applied: np.ndarray | None = None
    class_count: int = 43

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"images {self.images.shape} and labels {self.labels.shape} do not line up"
            )
        if not self.paths:
            self.paths = [f"<memory>/{i}" for i in range(len(self.labels))]
        if self.roi_applied is None:
            self.roi_applied = np.zeros(len(self.labels), dtype=bool)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i:i + 1], int(self.labels[i]), self.paths[i], self.source,
                      bool(self.roi_applied[i]))

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def histogram(self) -> np.ndarray:
        size = max(self.class_count, int(self.labels.max()) + 1 if len(self) else 0)
        return np.bincount(self.labels, minlength=size)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(
            self.images[idx], self.labels[idx], [self.paths[i] for i in idx], self.source,
            self.roi_applied[idx], self.class_count,
        )
