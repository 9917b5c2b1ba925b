"""Image-quality and set-consistency metrics.

psnr and ssim follow the standard definitions (ssim: 11x11 Gaussian window,
sigma 1.5, k1=0.01, k2=0.03, valid-window convolution, channel-averaged).
set_consistency measures how mutually similar a set of images is under an
embedder: the mean cosine over all unordered pairs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embed_filter import Embedder, cosine

__all__ = ["psnr", "ssim", "set_consistency", "MetricReport"]

PSNR_CAP_DB = 99.0
PSNR_CAP_MSE = 1e-10

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < PSNR_CAP_MSE:
        return PSNR_CAP_DB
    return 10.0 * math.log10(max_val * max_val / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _windowed_mean(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(x, kernel.shape)
    return np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))


def _ssim_channel(a: np.ndarray, b: np.ndarray) -> float:
    kernel = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2
    mu_a = _windowed_mean(a, kernel)
    mu_b = _windowed_mean(b, kernel)
    var_a = _windowed_mean(a * a, kernel) - mu_a * mu_a
    var_b = _windowed_mean(b * b, kernel) - mu_b * mu_b
    cov = _windowed_mean(a * b, kernel) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ValueError("expected an (H,W), (H,W,1) or (H,W,3) image")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    return float(np.mean([_ssim_channel(a[:, :, c], b[:, :, c]) for c in range(a.shape[2])]))


def set_consistency(images, embedder: Embedder) -> float:
    """Mean pairwise embedding cosine over all unordered image pairs."""
    if len(images) < 2:
        raise ValueError("set_consistency needs at least two images")
    embeddings = [embedder.embed(img) for img in images]
    values = [
        cosine(embeddings[i], embeddings[j])
        for i in range(len(embeddings))
        for j in range(i + 1, len(embeddings))
    ]
    return float(np.mean(values))


@dataclass
class MetricReport:
    metric: str
    fixture_id: str
    values: list[float]
    mean: float
    std: float

    @classmethod
    def from_values(cls, metric: str, fixture_id: str, values) -> "MetricReport":
        values = [float(v) for v in values]
        return cls(
            metric=metric,
            fixture_id=fixture_id,
            values=values,
            mean=float(np.mean(values)),
            std=float(np.std(values)),
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "metric": self.metric,
                "fixture_id": self.fixture_id,
                "values": self.values,
                "mean": self.mean,
                "std": self.std,
            },
            sort_keys=True,
        )


def write_reports(path: str | Path, reports: list[MetricReport]) -> None:
    Path(path).write_text("\n".join(r.to_json() for r in reports) + "\n", encoding="utf-8")
