"""Reconstruction and diversity metrics for posterior sample sets."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["DimensionMismatchError", "psnr", "per_pixel_variance", "EvalReport"]


class DimensionMismatchError(ValueError):
    """Compared images do not share a shape."""


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images.

    MSE averages over all pixels and channels; identical images return
    math.inf as the zero-MSE flag.  Symmetric in its arguments.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def per_pixel_variance(samples) -> tuple[np.ndarray, float]:
    """Unbiased per-pixel sample variance, channel-averaged.

    samples: sequence of >= 2 images with identical shape (H, W, C) or
    (H, W).  Returns (variance image (H, W), mean over pixels).
    """
    stack = [np.asarray(s, dtype=np.float64) for s in samples]
    if len(stack) < 2:
        raise ValueError("per-pixel variance needs at least 2 samples")
    shape = stack[0].shape
    for s in stack[1:]:
        if s.shape != shape:
            raise DimensionMismatchError(f"sample shapes differ: {shape} vs {s.shape}")
    arr = np.stack(stack)
    var = arr.var(axis=0, ddof=1)
    if var.ndim == 3:
        var = var.mean(axis=-1)
    return var, float(var.mean())


@dataclass
class EvalReport:
    """Summary of one posterior evaluation run."""

    per_view_psnr: list = field(default_factory=list)
    mean_per_pixel_variance: float = 0.0
    accept_rates: list = field(default_factory=list)
    runtime_seconds: float = 0.0

    def __post_init__(self):
        for v in self.per_view_psnr:
            if not (math.isfinite(v) or v == math.inf):
                raise ValueError("PSNR entries must be finite or the infinite flag")
        if self.mean_per_pixel_variance < 0.0:
            raise ValueError("variance must be nonnegative")

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_view_psnr": [
                    "inf" if v == math.inf else float(v) for v in self.per_view_psnr
                ],
                "mean_per_pixel_variance": self.mean_per_pixel_variance,
                "accept_rates": [float(a) for a in self.accept_rates],
                "runtime_seconds": self.runtime_seconds,
            },
            sort_keys=True,
            indent=2,
        )

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        d = json.loads(text)
        return EvalReport(
            per_view_psnr=[math.inf if v == "inf" else float(v) for v in d["per_view_psnr"]],
            mean_per_pixel_variance=d["mean_per_pixel_variance"],
            accept_rates=d["accept_rates"],
            runtime_seconds=d["runtime_seconds"],
        )
