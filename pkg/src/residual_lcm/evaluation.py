"""PSNR, perceptual-metric plugins, metric reports and the runtime harness."""

from __future__ import annotations

import json
import os
import platform
import statistics
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from .datapipe import ImagePair
from .imaging import to_uint8
from .sampler import PhaseTimer, SRPipeline, sample_ancestral, sample_single_step

ArrayLike = Union[np.ndarray, torch.Tensor]
DEFAULT_CAP = 100.0


def _as_float64(x: ArrayLike) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a: ArrayLike, b: ArrayLike, peak: float = 255.0, cap: float = DEFAULT_CAP) -> float:
    """``10 log10(peak^2 / MSE)`` in float64; ``cap`` when the images are identical."""
    a, b = _as_float64(a), _as_float64(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float(cap)
    return float(10.0 * np.log10(peak * peak / mse))


def image_psnr(sr: torch.Tensor, hr: torch.Tensor, cap: float = DEFAULT_CAP) -> float:
    """PSNR over all RGB values after the 8-bit write quantisation, peak 255."""
    return psnr(to_uint8(sr), to_uint8(hr), 255.0, cap)


# perceptual plugins ------------------------------------------------------------

Metric = Callable[[torch.Tensor, torch.Tensor], float]
_PLUGINS: Dict[str, Metric] = {}


class UnknownMetricError(KeyError):
    def __str__(self):
        return str(self.args[0])


def register_metric(name: str, fn: Metric) -> None:
    if not callable(fn):
        raise TypeError("metric plugin must be callable")
    _PLUGINS[name] = fn


def unregister_metric(name: str) -> None:
    _PLUGINS.pop(name, None)


def available_metrics() -> List[str]:
    return sorted(_PLUGINS)


def perceptual_metric(name: str, a: torch.Tensor, b: torch.Tensor) -> float:
    try:
        fn = _PLUGINS[name]
    except KeyError:
        raise UnknownMetricError(
            f"unknown metric {name!r}; registered: {available_metrics() or 'none'}") from None
    return float(fn(a, b))


# reports ------------------------------------------------------------------------

def metric_report(pairs: Sequence[ImagePair], sr_images: Sequence[torch.Tensor],
                  cap: float = DEFAULT_CAP, metrics: Sequence[str] = ()) -> dict:
    """Per-image and mean PSNR of the SR output and of the bicubic baseline,
    plus any requested registered perceptual metrics."""
    if len(pairs) != len(sr_images):
        raise ValueError(f"{len(pairs)} pairs but {len(sr_images)} SR images")
    if not pairs:
        raise ValueError("no images to evaluate")
    rows = []
    for pair, sr in zip(pairs, sr_images):
        row = {"id": pair.source_id,
               "psnr_sr": image_psnr(sr, pair.hr, cap),
               "psnr_bicubic": image_psnr(pair.lr_up, pair.hr, cap)}
        for name in metrics:
            row[name] = perceptual_metric(name, sr, pair.hr)
        rows.append(row)
    keys = [k for k in rows[0] if k != "id"]
    aggregate = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    aggregate["psnr_gain"] = aggregate["psnr_sr"] - aggregate["psnr_bicubic"]
    return {"num_images": len(rows), "aggregate": aggregate, "per_image": rows}


def write_json(report: dict, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2))
    return path


# timing ---------------------------------------------------------------------------

VARIANTS = ("single", "ancestral")


def environment() -> dict:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or platform.machine(),
        "platform": platform.platform(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "torch_threads": torch.get_num_threads(),
        "cpu_count": os.cpu_count(),
    }


def benchmark_runtime(variant: str, lr: torch.Tensor, pipeline: SRPipeline, repeats: int = 5,
                      warmup: int = 2, num_steps: int = 40, seed: int = 0) -> dict:
    """Wall-clock seconds per call of one sampler, warmup iterations excluded.

    ``denoiser_calls`` is read from the pipeline's call counter for a single
    measured call, so it cross-checks the step count directly.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")

    def run(timer):
        if variant == "single":
            return sample_single_step(lr, pipeline, seed, timer)
        return sample_ancestral(lr, pipeline, num_steps, seed, timer)

    for _ in range(warmup):
        run(PhaseTimer())
    times, calls = [], []
    phases: Dict[str, List[float]] = {}
    for _ in range(repeats):
        timer = PhaseTimer()
        before = pipeline.denoiser.calls
        start = time.perf_counter()
        run(timer)
        times.append(time.perf_counter() - start)
        calls.append(pipeline.denoiser.calls - before)
        for name, sec in timer.totals.items():
            phases.setdefault(name, []).append(sec)
    if len(set(calls)) != 1:
        raise RuntimeError(f"denoiser call count varied across repeats: {calls}")
    return {
        "variant": variant,
        "num_steps": 1 if variant == "single" else num_steps,
        "denoiser_calls": calls[0],
        "mean_s": statistics.fmean(times),
        "std_s": statistics.stdev(times),
        "times_s": times,
        "phases_mean_s": {k: statistics.fmean(v) for k, v in phases.items()},
        "input_shape": list(lr.shape),
        "environment": {**environment(), "repeats": repeats, "warmup": warmup},
    }


def compare_runtime(lr: torch.Tensor, pipeline: SRPipeline, repeats: int = 5, warmup: int = 2,
                    num_steps: int = 40, seed: int = 0) -> dict:
    single = benchmark_runtime("single", lr, pipeline, repeats, warmup, num_steps, seed)
    ancestral = benchmark_runtime("ancestral", lr, pipeline, repeats, warmup, num_steps, seed)
    return {"single": single, "ancestral": ancestral,
            "ratio_mean": ancestral["mean_s"] / single["mean_s"]}


def super_resolve(pairs: Sequence[ImagePair], pipeline: SRPipeline, seed: int,
                  num_steps: Optional[int] = None) -> List[torch.Tensor]:
    """SR outputs for ``pairs``; one-step unless ``num_steps`` is given."""
    out = []
    for i, pair in enumerate(pairs):
        if num_steps is None:
            out.append(sample_single_step(pair.lr, pipeline, seed + i))
        else:
            out.append(sample_ancestral(pair.lr, pipeline, num_steps, seed + i))
    return out


__all__ = ["psnr", "image_psnr", "register_metric", "unregister_metric", "available_metrics",
           "perceptual_metric", "UnknownMetricError", "metric_report", "benchmark_runtime",
           "compare_runtime", "super_resolve", "environment", "write_json"]
