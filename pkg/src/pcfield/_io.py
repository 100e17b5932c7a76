"""Small file-writing helpers shared by the field formats and the CLI.

All writers go through atomic_write_bytes (write to a temp file in the target
directory, then rename) so a crashed run never leaves a half-written file and
reruns with the same inputs produce byte-identical outputs.
"""

from __future__ import annotations

import io
import os
import tempfile

import numpy as np
from PIL import Image


def atomic_write_bytes(path: str, data: bytes) -> None:
    dirname = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def save_gray8_png(path: str, values: np.ndarray) -> None:
    """Write a (H, W) uint8 array as an 8-bit grayscale PNG."""
    arr = np.ascontiguousarray(values, dtype=np.uint8)
    atomic_write_bytes(path, _png_bytes(Image.fromarray(arr, mode="L")))


def save_gray16_png(path: str, values: np.ndarray) -> None:
    """Write a (H, W) uint16 array as a 16-bit grayscale PNG."""
    arr = np.ascontiguousarray(values, dtype=np.uint16)
    atomic_write_bytes(path, _png_bytes(Image.fromarray(arr)))


def save_rgb_png(path: str, rgb: np.ndarray) -> None:
    """Write a (H, W, 3) uint8 array as an RGB PNG."""
    arr = np.ascontiguousarray(rgb, dtype=np.uint8)
    atomic_write_bytes(path, _png_bytes(Image.fromarray(arr, mode="RGB")))


def save_mask_png(path: str, mask: np.ndarray) -> None:
    """Write a boolean (H, W) mask as 0/255 grayscale PNG."""
    save_gray8_png(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def load_mask_png(path: str) -> np.ndarray:
    """Read a grayscale PNG as a boolean mask (nonzero = True)."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return arr > 127
