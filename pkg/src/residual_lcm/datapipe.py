"""HR/LR pair construction: folder ingestion, x4 bicubic degradation, splits
and a procedurally generated desk-scale corpus.

LR images are always derived from HR with :func:`bicubic_resize`; they are
never read from disk.  The antialiased bicubic kernel can overshoot the HR
range slightly, so only the HR tensor is guaranteed to lie in [-1, 1].
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import UnidentifiedImageError

from .imaging import bicubic_resize, load_image, quantize, save_image

log = logging.getLogger(__name__)

SCALE = 4
QUARTER = Fraction(1, SCALE)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class ImagePair:
    hr: torch.Tensor
    lr: torch.Tensor
    lr_up: torch.Tensor
    source_id: str

    def __post_init__(self):
        c, h, w = self.hr.shape
        if self.lr.shape != (c, h // SCALE, w // SCALE) or h % SCALE or w % SCALE:
            raise ValueError(f"{self.source_id}: HR {tuple(self.hr.shape)} is not x4 of "
                             f"LR {tuple(self.lr.shape)}")
        if self.lr_up.shape != self.hr.shape:
            raise ValueError(f"{self.source_id}: upsampled LR does not match HR shape")
        for t in (self.hr, self.lr, self.lr_up):
            if not torch.isfinite(t).all():
                raise ValueError(f"{self.source_id}: non-finite pixel values")
        if self.hr.min() < -1.0 or self.hr.max() > 1.0:
            raise ValueError(f"{self.source_id}: HR values outside [-1, 1]")


def make_pair(hr: torch.Tensor, source_id: str) -> ImagePair:
    lr = bicubic_resize(hr, QUARTER)
    return ImagePair(hr, lr, bicubic_resize(lr, SCALE), source_id)


def stack_pairs(pairs: Sequence[ImagePair]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batch tensors ``(hr, lr, lr_up)`` stacked along a new leading axis."""
    if not pairs:
        raise ValueError("empty dataset")
    return (torch.stack([p.hr for p in pairs]), torch.stack([p.lr for p in pairs]),
            torch.stack([p.lr_up for p in pairs]))


# synthetic corpus -----------------------------------------------------------

def _grid(size: int):
    ax = (np.arange(size) + 0.5) / size
    return np.meshgrid(ax, ax, indexing="ij")


def _gradient(rng, size, channels):
    y, x = _grid(size)
    angle = rng.uniform(0, 2 * np.pi, channels)
    ramp = [np.cos(a) * x + np.sin(a) * y for a in angle]
    return np.stack([2 * (r - r.min()) / (np.ptp(r) + 1e-12) - 1 for r in ramp])


def _checkerboard(rng, size, channels):
    cell = int(rng.integers(1, 5))
    idx = np.arange(size) // cell
    board = ((idx[:, None] + idx[None, :]) % 2).astype(np.float64)
    lo, hi = rng.uniform(-1, 0, channels), rng.uniform(0, 1, channels)
    return lo[:, None, None] + (hi - lo)[:, None, None] * board[None]


def _blobs(rng, size, channels):
    y, x = _grid(size)
    img = np.full((channels, size, size), -0.8)
    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0, 1, 2)
        s = rng.uniform(0.03, 0.15)
        amp = rng.uniform(0.3, 1.5, channels)
        g = np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * s * s))
        img += amp[:, None, None] * g[None]
    return img


def _band_noise(rng, size, channels):
    spec = np.fft.fft2(rng.standard_normal((channels, size, size)))
    f = np.fft.fftfreq(size)
    radius = np.hypot(f[:, None], f[None, :])
    lo, hi = 0.08, rng.uniform(0.2, 0.45)
    spec *= ((radius >= lo) & (radius <= hi))[None]
    img = np.fft.ifft2(spec).real
    return img / (np.abs(img).max() + 1e-12) * 0.9


def _stripes(rng, size, channels):
    y, x = _grid(size)
    freq = rng.uniform(3, size / 3)
    angle = rng.uniform(0, np.pi)
    wave = np.sin(2 * np.pi * freq * (np.cos(angle) * x + np.sin(angle) * y))
    return 0.3 * _gradient(rng, size, channels) + 0.6 * wave[None]


GENERATORS = (_gradient, _checkerboard, _blobs, _band_noise, _stripes)


def synth_image(kind: int, size: int, seed: int, channels: int = 3) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    img = GENERATORS[kind % len(GENERATORS)](rng, size, channels)
    hr = torch.from_numpy(np.clip(img, -1.0, 1.0)).to(torch.float32)
    return quantize(hr)


def synth_corpus(n: int, hr_size: int, seed: int, channels: int = 3,
                 latent_factor: int = 1) -> List[ImagePair]:
    """``n`` procedural pairs cycling gradients, checkerboards, Gaussian blobs,
    band-limited noise and oriented stripes.  HR is snapped to the 8-bit grid
    so written PNGs reload bit-identically."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if hr_size < SCALE or hr_size % SCALE or hr_size % latent_factor:
        raise ValueError(f"hr_size {hr_size} must be divisible by {SCALE} and {latent_factor}")
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [make_pair(synth_image(i, hr_size, int(s), channels), f"synth_{i:05d}")
            for i, s in enumerate(seeds)]


def write_pairs(pairs: Sequence[ImagePair], out_dir: Union[str, Path], **meta) -> Path:
    """Write ``hr/<id>.png``, ``lr/<id>.png`` and ``manifest.json``."""
    out = Path(out_dir)
    (out / "hr").mkdir(parents=True, exist_ok=True)
    (out / "lr").mkdir(parents=True, exist_ok=True)
    for p in pairs:
        save_image(p.hr, out / "hr" / f"{p.source_id}.png")
        save_image(p.lr, out / "lr" / f"{p.source_id}.png")
    manifest = {"pairs": [p.source_id for p in pairs], "scale": SCALE, **meta}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


# folder ingestion ------------------------------------------------------------

@dataclass
class DatasetSplits:
    train: List[ImagePair]
    val: List[ImagePair]
    test: List[ImagePair]
    skipped: List[str] = field(default_factory=list)
    seed: int = 0
    patch_size: int = 0

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "patch_size": self.patch_size,
            "train": [p.source_id for p in self.train],
            "val": [p.source_id for p in self.val],
            "test": [p.source_id for p in self.test],
            "skipped": list(self.skipped),
        }

    def write_manifest(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.manifest(), indent=2))
        return path


def scan_images(root: Union[str, Path]) -> List[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"image folder not found: {root}")
    if (root / "hr").is_dir():
        root = root / "hr"
    return sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)


def split_sizes(n: int, fractions: Sequence[float]) -> Tuple[int, int, int]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"split fractions must be 3 non-negative values summing to 1: {fractions}")
    n_train = min(n, int(round(fractions[0] * n)))
    n_val = min(n - n_train, int(round(fractions[1] * n)))
    return n_train, n_val, n - n_train - n_val


def build_dataset(root: Union[str, Path], patch_size: int,
                  split_fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0,
                  channels: int = 3) -> DatasetSplits:
    """Crop one 4-aligned HR patch per image and split deterministically.

    A folder containing an ``hr/`` subdirectory (as written by
    :func:`write_pairs`) is read from there.  Unreadable or too-small files
    are skipped and listed in ``DatasetSplits.skipped``.
    """
    if patch_size < SCALE or patch_size % SCALE:
        raise ValueError(f"patch size {patch_size} is not divisible by the x{SCALE} scale")
    rng = np.random.default_rng(seed)
    pairs: List[ImagePair] = []
    skipped: List[str] = []
    root_path = Path(root)
    for path in scan_images(root_path):
        try:
            img = load_image(path, channels)
        except (OSError, UnidentifiedImageError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            skipped.append(str(path))
            continue
        _, h, w = img.shape
        if h < patch_size or w < patch_size:
            log.warning("skipping %s: %dx%d smaller than patch %d", path, h, w, patch_size)
            skipped.append(str(path))
            continue
        top = int(rng.integers(0, (h - patch_size) // SCALE + 1)) * SCALE
        left = int(rng.integers(0, (w - patch_size) // SCALE + 1)) * SCALE
        hr = img[:, top:top + patch_size, left:left + patch_size].contiguous()
        pairs.append(make_pair(hr, path.stem))
    if skipped:
        log.warning("%d file(s) skipped under %s", len(skipped), root_path)
    if not pairs:
        raise ValueError(f"no usable images found under {root_path}")
    order = rng.permutation(len(pairs))
    pairs = [pairs[i] for i in order]
    n_train, n_val, _ = split_sizes(len(pairs), split_fractions)
    return DatasetSplits(pairs[:n_train], pairs[n_train:n_train + n_val],
                         pairs[n_train + n_val:], skipped, seed, patch_size)


__all__ = ["ImagePair", "make_pair", "stack_pairs", "synth_corpus", "write_pairs",
           "build_dataset", "DatasetSplits", "split_sizes", "bicubic_resize"]
