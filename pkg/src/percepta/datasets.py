"""Dataset ingestion: big-endian IDX containers and labeled PNG directories."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from percepta.images import from_png_bytes

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetFormatError(ValueError):
    pass


@dataclass
class DatasetHandle:
    kind: str                # "idx_gray" or "png_dir"
    images: np.ndarray       # (count, channels, height, width) floats in [0, 1]
    labels: np.ndarray       # (count,) ints

    @property
    def count(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def _read_be32(data: bytes, offset: int, path, what: str) -> int:
    if offset + 4 > len(data):
        raise DatasetFormatError(f"{path}: truncated while reading {what}")
    return struct.unpack_from(">I", data, offset)[0]


def ingest_idx(images_path: Union[str, Path], labels_path: Union[str, Path]) -> DatasetHandle:
    """Parse an images/labels IDX pair; pixel bytes are scaled by 1/255."""
    raw = Path(images_path).read_bytes()
    magic = _read_be32(raw, 0, images_path, "magic")
    if magic != IDX_IMAGES_MAGIC:
        raise DatasetFormatError(
            f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )
    count = _read_be32(raw, 4, images_path, "item count")
    rows = _read_be32(raw, 8, images_path, "row count")
    cols = _read_be32(raw, 12, images_path, "column count")
    expected = 16 + count * rows * cols
    if len(raw) < expected:
        raise DatasetFormatError(
            f"{images_path}: expected {expected} bytes for {count} images "
            f"of {rows}x{cols}, file has {len(raw)}"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    images = pixels.reshape(count, 1, rows, cols).astype(float) / 255.0

    raw_labels = Path(labels_path).read_bytes()
    magic = _read_be32(raw_labels, 0, labels_path, "magic")
    if magic != IDX_LABELS_MAGIC:
        raise DatasetFormatError(
            f"{labels_path}: magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )
    label_count = _read_be32(raw_labels, 4, labels_path, "item count")
    if label_count != count:
        raise DatasetFormatError(
            f"image file has {count} items but label file has {label_count}"
        )
    if len(raw_labels) < 8 + count:
        raise DatasetFormatError(f"{labels_path}: truncated label payload")
    labels = np.frombuffer(raw_labels, dtype=np.uint8, count=count, offset=8).astype(int)
    return DatasetHandle(kind="idx_gray", images=images, labels=labels)


def write_idx(
    images: np.ndarray, labels: np.ndarray, images_path, labels_path
) -> None:
    """Inverse of ingest_idx, for building fixtures and exporting subsets."""
    images = np.asarray(images)
    count, channels, rows, cols = images.shape
    if channels != 1:
        raise ValueError("IDX containers hold single-channel images")
    quantized = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols))
        f.write(quantized.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, count))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def ingest_png_dir(directory: Union[str, Path]) -> DatasetHandle:
    """Load a directory of PNGs with a labels.json manifest.

    The manifest maps file names to integer labels; every listed file
    must decode to the same image shape.
    """
    directory = Path(directory)
    manifest_path = directory / "labels.json"
    if not manifest_path.exists():
        raise DatasetFormatError(f"{directory} has no labels.json manifest")
    manifest = json.loads(manifest_path.read_text())
    if not isinstance(manifest, dict) or not manifest:
        raise DatasetFormatError(f"{manifest_path} must map file names to labels")
    images, labels = [], []
    shape = None
    for name in sorted(manifest):
        img = from_png_bytes((directory / name).read_bytes())
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise DatasetFormatError(
                f"{name} has shape {img.shape}, expected {shape}"
            )
        images.append(img)
        labels.append(int(manifest[name]))
    return DatasetHandle(
        kind="png_dir", images=np.stack(images), labels=np.asarray(labels)
    )
