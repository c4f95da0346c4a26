"""Dataset ingestion for GTSRB-style trees, the Chinese TSRD layout and manifests.

All loaders return samples in lexicographic order of their relative paths,
so repeated loads of the same tree are bit-identical.
"""

from __future__ import annotations

import csv
import os
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .dataset import DatasetError, LabeledDataset, Source
from .images import decode_image, preprocess

IMAGE_SUFFIXES = (".ppm", ".png")
GTSRB_HEADER = ["Filename", "Width", "Height", "Roi.X1", "Roi.Y1", "Roi.X2", "Roi.Y2", "ClassId"]
GTSRB_TRAIN_SIZE = 39209
GTSRB_TEST_SIZE = 12630


def _decode_one(job):
    path, size, roi, expect_wh = job
    try:
        img = decode_image(Path(path).read_bytes())
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from None
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}") from None
    if expect_wh is not None and (img.shape[1], img.shape[0]) != expect_wh:
        raise DatasetError(
            f"{path}: annotation says {expect_wh[0]}x{expect_wh[1]}, "
            f"file is {img.shape[1]}x{img.shape[0]}"
        )
    try:
        return preprocess(img, size, roi)
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}") from None


def _assemble(root: Path, entries, size: int, source: Source, workers: int) -> LabeledDataset:
    """``entries``: (relative path, label, roi or None, (w, h) or None)."""
    entries = sorted(entries, key=lambda e: e[0])
    jobs = [(root / rel, size, roi, wh) for rel, _, roi, wh in entries]
    if workers > 1:
        # map preserves submission order, so scheduling cannot reorder samples
        with ThreadPoolExecutor(workers) as pool:
            images = list(pool.map(_decode_one, jobs))
    else:
        images = [_decode_one(j) for j in jobs]
    arr = np.stack(images) if images else np.zeros((0, size, size, 3), np.float32)
    return LabeledDataset(
        arr,
        np.array([e[1] for e in entries], dtype=np.int64),
        [e[0] for e in entries],
        source,
        np.array([e[2] is not None for e in entries], dtype=bool),
    )


def read_gtsrb_csv(path: Path, require_class: bool = True) -> list[dict]:
    """Parse a semicolon-delimited GTSRB annotation file."""
    try:
        text = path.read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise DatasetError(f"cannot read annotation file {path}: {exc}") from None
    rows = list(csv.reader(text.splitlines(), delimiter=";"))
    if not rows:
        raise DatasetError(f"{path}: empty annotation file")
    header = [h.strip() for h in rows[0] if h.strip()]
    needed = GTSRB_HEADER if require_class else GTSRB_HEADER[:-1]
    missing = [h for h in needed if h not in header]
    if missing:
        raise DatasetError(f"{path}: header lacks column(s) {', '.join(missing)}")
    col = {h: header.index(h) for h in needed}
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in row):
            continue
        try:
            rec = {"Filename": row[col["Filename"]].strip()}
            for key in needed[1:]:
                rec[key] = int(row[col[key]])
        except (IndexError, ValueError):
            raise DatasetError(f"{path}:{lineno}: malformed row {';'.join(row)!r}") from None
        w, h = rec["Width"], rec["Height"]
        if not (0 <= rec["Roi.X1"] <= rec["Roi.X2"] <= w and 0 <= rec["Roi.Y1"] <= rec["Roi.Y2"] <= h):
            raise DatasetError(
                f"{path}:{lineno}: ROI ({rec['Roi.X1']},{rec['Roi.Y1']})-"
                f"({rec['Roi.X2']},{rec['Roi.Y2']}) outside {w}x{h} image {rec['Filename']}"
            )
        rec["lineno"] = lineno
        out.append(rec)
    return out


def _csv_entries(folder: Path, rel_prefix: str, table: list[dict], label=None, use_roi=True):
    entries = []
    for rec in table:
        if not (folder / rec["Filename"]).is_file():
            raise DatasetError(
                f"{folder}:{rec['lineno']}: row references missing file {rec['Filename']}"
            )
        roi = (rec["Roi.X1"], rec["Roi.Y1"], rec["Roi.X2"], rec["Roi.Y2"]) if use_roi else None
        entries.append((
            f"{rel_prefix}{rec['Filename']}",
            rec["ClassId"] if label is None else label,
            roi,
            (rec["Width"], rec["Height"]),
        ))
    return entries


def _find_train_root(root: Path) -> Path:
    for cand in (root, root / "Final_Training" / "Images", root / "GTSRB" / "Final_Training" / "Images",
                 root / "Training"):
        if cand.is_dir() and any(p.is_dir() and p.name.isdigit() for p in cand.iterdir()):
            return cand
    raise DatasetError(f"{root}: no per-class numeric subfolders found")


def load_class_folders(root, size: int, source: Source = Source.GTSRB, use_roi: bool = True,
                       workers: int = 1) -> LabeledDataset:
    """Per-class subfolders ``00000/ 00001/ ...``; label = folder number.

    A folder's ``GT-*.csv`` (GTSRB/BelgiumTSC convention) supplies ROIs; folders
    without one contribute every image file uncropped.
    """
    base = _find_train_root(Path(root))
    entries = []
    for folder in sorted(p for p in base.iterdir() if p.is_dir() and p.name.isdigit()):
        label = int(folder.name)
        csvs = sorted(folder.glob("GT-*.csv"))
        if csvs:
            table = read_gtsrb_csv(csvs[0], require_class=False)
            entries += _csv_entries(folder, f"{folder.name}/", table, label=label, use_roi=use_roi)
        else:
            entries += [(f"{folder.name}/{f.name}", label, None, None)
                        for f in folder.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES]
    return _assemble(base, entries, size, source, workers)


def _find_test_csv(root: Path) -> tuple[Path, Path]:
    for folder in (root, root / "Final_Test" / "Images", root / "GTSRB" / "Final_Test" / "Images"):
        if not folder.is_dir():
            continue
        for cand in sorted(folder.glob("*.csv")):
            head = cand.read_text(encoding="utf-8-sig").split("\n", 1)[0]
            if "ClassId" in head:
                return folder, cand
    raise DatasetError(f"{root}: missing annotation CSV with a ClassId column")


def load_gtsrb(root, split: str = "train", size: int = 30, use_roi: bool = True,
               workers: int = 1) -> LabeledDataset:
    """Load the GTSRB training tree or the labeled test folder."""
    split = split.lower()
    root = Path(root)
    if split == "train":
        return load_class_folders(root, size, Source.GTSRB, use_roi, workers)
    if split != "test":
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    folder, csv_path = _find_test_csv(root)
    table = read_gtsrb_csv(csv_path, require_class=True)
    entries = _csv_entries(folder, "", table, use_roi=use_roi)
    return _assemble(folder, entries, size, Source.GTSRB, workers)


_TSRD_NAME = re.compile(r"^(\d+)_")


def load_chinese(root, size: int, use_roi: bool = True, workers: int = 1) -> LabeledDataset:
    """Chinese TSRD test images ``LLL_NNNN*.png``.

    An annotation file ``*Annotation*.txt`` (``file;w;h;x1;y1;x2;y2;label;``)
    supplies ROIs and labels; otherwise labels come from the filename prefix.
    """
    root = Path(root)
    ann = sorted(root.glob("*nnotation*.txt"))
    entries = []
    if ann:
        for lineno, line in enumerate(ann[0].read_text().splitlines(), start=1):
            parts = [p.strip() for p in line.strip().split(";") if p.strip()]
            if not parts:
                continue
            try:
                name = parts[0]
                w, h, x1, y1, x2, y2, label = (int(v) for v in parts[1:8])
            except ValueError:
                raise DatasetError(f"{ann[0]}:{lineno}: malformed annotation {line!r}") from None
            if not (root / name).is_file():
                raise DatasetError(f"{ann[0]}:{lineno}: row references missing file {name}")
            if not (0 <= x1 <= x2 <= w and 0 <= y1 <= y2 <= h):
                raise DatasetError(f"{ann[0]}:{lineno}: ROI outside {w}x{h} image {name}")
            entries.append((name, label, (x1, y1, x2, y2) if use_roi else None, (w, h)))
    else:
        for f in root.iterdir():
            m = _TSRD_NAME.match(f.name)
            if m and f.suffix.lower() in IMAGE_SUFFIXES:
                entries.append((f.name, int(m.group(1)), None, None))
    if not entries:
        raise DatasetError(f"{root}: no Chinese TSRD images found")
    return _assemble(root, entries, size, Source.CHINESE, workers)


def load_manifest(manifest, size: int, root=None, source: Source = Source.OTHER,
                  workers: int = 1) -> LabeledDataset:
    """Generic test set: lines ``relative_path,label`` (``#`` starts a comment)."""
    manifest = Path(manifest)
    root = Path(root) if root is not None else manifest.parent
    entries = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        rel, sep, label = line.rpartition(",")
        try:
            lab = int(label)
        except ValueError:
            lab = None
        if not sep or lab is None:
            raise DatasetError(f"{manifest}:{lineno}: expected 'relative_path,label', got {line!r}")
        if not (root / rel.strip()).is_file():
            raise DatasetError(f"{manifest}:{lineno}: missing file {rel.strip()}")
        entries.append((rel.strip(), lab, None, None))
    return _assemble(root, entries, size, source, workers)


def load_dataset(path, size: int, kind: str = "auto", workers: int = 1) -> LabeledDataset:
    """Dispatch on ``kind`` (auto, gtsrb-train, gtsrb-test, folders, chinese, manifest)."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file or directory")
    if kind == "auto":
        if path.is_file():
            kind = "manifest"
        else:
            try:
                _find_test_csv(path)
                kind = "gtsrb-test"
            except DatasetError:
                try:
                    _find_train_root(path)
                    kind = "folders"
                except DatasetError:
                    kind = "chinese"
    if kind == "manifest":
        return load_manifest(path, size, workers=workers)
    if kind == "gtsrb-test":
        return load_gtsrb(path, "test", size, workers=workers)
    if kind in ("gtsrb-train", "folders"):
        return load_class_folders(path, size, workers=workers)
    if kind == "belgian":
        return load_class_folders(path, size, Source.BELGIAN, workers=workers)
    if kind == "chinese":
        return load_chinese(path, size, workers=workers)
    raise ValueError(f"unknown dataset kind {kind!r}")


def default_data_dir() -> str | None:
    return os.environ.get("BNN_DATA_DIR")
