"""8-bit PNG round-tripping for (channels, height, width) float images."""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image


def to_png_bytes(image: np.ndarray) -> bytes:
    """Encode floats in [0, 1] as 8-bit grayscale (1 channel) or RGB (3)."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, height, width), got {image.shape}")
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    if image.shape[0] == 1:
        pil = Image.fromarray(quantized[0], mode="L")
    else:
        pil = Image.fromarray(np.moveaxis(quantized, 0, 2), mode="RGB")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def from_png_bytes(data: bytes) -> np.ndarray:
    pil = Image.open(io.BytesIO(data))
    arr = np.asarray(pil)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    elif arr.ndim == 3:
        arr = np.moveaxis(arr, 2, 0)
        if arr.shape[0] == 4:  # drop alpha
            arr = arr[:3]
    else:
        raise ValueError(f"unsupported PNG layout {arr.shape}")
    return arr.astype(float) / 255.0


def to_png_base64(image: np.ndarray) -> str:
    return base64.b64encode(to_png_bytes(image)).decode("ascii")


def from_png_base64(text: str) -> np.ndarray:
    return from_png_bytes(base64.b64decode(text))


def black_square_png_base64(like: np.ndarray) -> str:
    return to_png_base64(np.zeros_like(np.asarray(like, dtype=float)))
