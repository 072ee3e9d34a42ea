"""Pixel-level helpers: bicubic resampling, value-range mapping, PNG I/O."""

from __future__ import annotations

from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Union

import numpy as np
import torch
from PIL import Image

BICUBIC_A = -0.5

Scale = Union[int, float, Fraction]


def cubic_kernel(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


@lru_cache(maxsize=64)
def resize_matrix(in_size: int, out_size: int, a: float = BICUBIC_A) -> np.ndarray:
    """Dense ``(out_size, in_size)`` float64 bicubic interpolation matrix.

    Pixel centres are aligned (half-pixel convention).  When shrinking, the
    kernel is stretched by the reduction factor (antialiasing).  Taps that
    fall outside the image are folded onto the nearest edge pixel.
    """
    scale = out_size / in_size
    stretch = min(scale, 1.0)
    support = 2.0 / stretch
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    for i in range(out_size):
        center = (i + 0.5) / scale - 0.5
        lo = int(np.floor(center - support))
        hi = int(np.ceil(center + support))
        taps = np.arange(lo, hi + 1)
        w = cubic_kernel((taps - center) * stretch, a)
        np.add.at(mat[i], np.clip(taps, 0, in_size - 1), w)
        mat[i] /= mat[i].sum()
    mat.setflags(write=False)
    return mat


def _target_size(n: int, scale: Scale) -> int:
    out = Fraction(scale).limit_denominator(1 << 20) * n
    if out.denominator != 1 or out <= 0:
        raise ValueError(f"size {n} x scale {scale} is not a positive integer")
    return int(out)


def bicubic_resize(image: torch.Tensor, scale: Scale) -> torch.Tensor:
    """Resize the last two axes of ``image`` by ``scale`` (e.g. 4 or 1/4)."""
    h, w = image.shape[-2:]
    rows = resize_matrix(h, _target_size(h, scale))
    cols = resize_matrix(w, _target_size(w, scale))
    rows = torch.tensor(rows, dtype=image.dtype, device=image.device)
    cols = torch.tensor(cols, dtype=image.dtype, device=image.device)
    return rows @ image @ cols.T


def to_unit_range(pixels: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """8-bit ``(H, W, C)`` or ``(H, W)`` array -> ``(C, H, W)`` tensor in [-1, 1]."""
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    t = torch.from_numpy(np.array(arr.transpose(2, 0, 1))).to(dtype)
    return t / 127.5 - 1.0


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """``(C, H, W)`` tensor in [-1, 1] -> ``(H, W, C)`` uint8, rounding half away from zero."""
    v = ((image.detach().to(torch.float64) + 1.0) * 127.5).clamp(0.0, 255.0)
    v = torch.floor(v + 0.5)
    return v.permute(1, 2, 0).cpu().numpy().astype(np.uint8)


def quantize(image: torch.Tensor) -> torch.Tensor:
    """Snap an image in [-1, 1] onto the 8-bit grid it would have on disk."""
    if image.ndim == 4:
        return torch.stack([quantize(im) for im in image])
    return to_unit_range(to_uint8(image), image.dtype).to(image.device)


def load_image(path: Union[str, Path], channels: int = 3) -> torch.Tensor:
    mode = {1: "L", 3: "RGB"}[channels]
    with Image.open(path) as im:
        return to_unit_range(np.asarray(im.convert(mode)))


def save_image(image: torch.Tensor, path: Union[str, Path]) -> None:
    arr = to_uint8(image)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)
