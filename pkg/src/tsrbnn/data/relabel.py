"""Cross-dataset relabeling into the 43-class GTSRB label space."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .dataset import DatasetError, LabeledDataset

GTSRB_CLASSES = 43


@dataclass(frozen=True)
class RelabelMap:
    """``source label -> GTSRB label``; unmapped source labels are dropped."""

    pairs: dict

    def __post_init__(self):
        targets = list(self.pairs.values())
        bad = [t for t in targets if not 0 <= t < GTSRB_CLASSES]
        if bad:
            raise DatasetError(f"relabel targets must lie in [0, {GTSRB_CLASSES}), got {bad}")
        if len(set(targets)) != len(targets):
            raise DatasetError("relabel map must be injective (duplicate target label)")

    @classmethod
    def identity(cls, classes: int = GTSRB_CLASSES) -> "RelabelMap":
        return cls({i: i for i in range(classes)})

    @classmethod
    def parse(cls, text: str, origin: str = "<string>") -> "RelabelMap":
        pairs = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                src, dst = (int(v) for v in line.split(","))
            except ValueError:
                raise DatasetError(
                    f"{origin}:{lineno}: expected 'source_label,target_label', got {line!r}"
                ) from None
            if src in pairs:
                raise DatasetError(f"{origin}:{lineno}: source label {src} mapped twice")
            pairs[src] = dst
        return cls(pairs)

    @classmethod
    def load(cls, path) -> "RelabelMap":
        path = Path(path)
        return cls.parse(path.read_text(), str(path))

    @classmethod
    def example(cls, name: str) -> "RelabelMap":
        """Shipped example maps: ``belgian`` or ``chinese``."""
        text = resources.files("tsrbnn.data").joinpath("maps", f"{name}_example.map").read_text()
        return cls.parse(text, f"{name}_example.map")


def remap_labels(ds: LabeledDataset, mapping: RelabelMap) -> LabeledDataset:
    keep = np.array([int(l) in mapping.pairs for l in ds.labels], dtype=bool)
    out = ds.subset(np.flatnonzero(keep))
    out.labels = np.array([mapping.pairs[int(l)] for l in out.labels], dtype=np.int64)
    out.class_count = GTSRB_CLASSES
    return out
