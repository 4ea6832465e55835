"""Desk-scale evaluation: PSNR, SSIM, and sample-diversity measures.

Classifier-based scores (IS/MIS/FID/LPIPS) are deliberately absent: they need
external pretrained networks, and emitting proxies under those names would
invite meaningless comparisons. Diversity uses the distinct-structure count
plus a pixel-space L1 proxy over consecutive sample pairs in the hole.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PSNR_CAP_DB = 100.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0,1]-range images, capped at 100."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("psnr inputs must share a shape")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = size // 2
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Windowed structural similarity: 11x11 Gaussian window, sigma 1.5.

    Statistics are Gaussian-weighted over each valid window; the result is the
    mean over windows and channels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("ssim inputs must share a shape")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < _SSIM_WINDOW or a.shape[1] < _SSIM_WINDOW:
        raise ValueError(f"images must be at least {_SSIM_WINDOW}px per side")
    window = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)
    values = [
        _ssim_channel(a[..., ch], b[..., ch], window)
        for ch in range(a.shape[-1])
    ]
    return float(np.mean(values))


def _ssim_channel(x: np.ndarray, y: np.ndarray, window: np.ndarray) -> float:
    def wfilter(img):
        view = np.lib.stride_tricks.sliding_window_view(img, window.shape)
        return np.tensordot(view, window, axes=([2, 3], [0, 1]))

    mu_x = wfilter(x)
    mu_y = wfilter(y)
    xx = wfilter(x * x) - mu_x ** 2
    yy = wfilter(y * y) - mu_y ** 2
    xy = wfilter(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + _SSIM_C1) * (2 * xy + _SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + _SSIM_C1) * (xx + yy + _SSIM_C2)
    return float(np.mean(num / den))


def diversity(index_grids: list[np.ndarray], images: list[np.ndarray],
              mask: np.ndarray) -> tuple[int, float]:
    """(distinct index grids, mean consecutive-pair L1 inside the hole)."""
    if len(index_grids) != len(images):
        raise ValueError("need one image per index grid")
    distinct = len({np.asarray(g).tobytes() for g in index_grids})
    hole = np.asarray(mask, dtype=np.float64)[..., None]
    area = hole.sum() * images[0].shape[-1] if images else 0.0
    pair_l1 = [
        float(np.abs((np.asarray(x) - np.asarray(y)) * hole).sum() / area)
        for x, y in zip(images[:-1], images[1:])
    ] if area > 0 else []
    mean_l1 = float(np.mean(pair_l1)) if pair_l1 else 0.0
    return distinct, mean_l1


@dataclass
class EvalReport:
    """Per-image rows plus aggregates; aggregates are plain means."""

    sample_count: int
    rows: list[dict] = field(default_factory=list)

    def add(self, image_id: str, psnr_db: float, ssim_value: float,
            distinct: int, pairwise_l1: float) -> None:
        self.rows.append({
            "image": image_id,
            "psnr": psnr_db,
            "ssim": ssim_value,
            "distinct": distinct,
            "pairwise_l1": pairwise_l1,
        })

    def aggregate(self) -> dict:
        if not self.rows:
            return {"psnr": 0.0, "ssim": 0.0, "distinct": 0.0, "pairwise_l1": 0.0}
        return {
            key: float(np.mean([r[key] for r in self.rows]))
            for key in ("psnr", "ssim", "distinct", "pairwise_l1")
        }

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image", "psnr", "ssim", "distinct", "pairwise_l1"])
            for r in self.rows:
                writer.writerow([
                    r["image"], f"{r['psnr']:.6f}", f"{r['ssim']:.6f}",
                    r["distinct"], f"{r['pairwise_l1']:.6f}",
                ])
            agg = self.aggregate()
            writer.writerow([
                "aggregate", f"{agg['psnr']:.6f}", f"{agg['ssim']:.6f}",
                f"{agg['distinct']:.3f}", f"{agg['pairwise_l1']:.6f}",
            ])

    def summary(self) -> str:
        agg = self.aggregate()
        lines = [
            f"images evaluated: {len(self.rows)}",
            f"samples per image: {self.sample_count}",
            f"mean PSNR: {agg['psnr']:.3f} dB",
            f"mean SSIM: {agg['ssim']:.4f}",
            f"mean distinct structures: {agg['distinct']:.2f} / {self.sample_count}",
            f"mean hole-region pairwise L1: {agg['pairwise_l1']:.5f}",
            "IS/MIS/FID/LPIPS: not computed (require external pretrained classifiers).",
        ]
        return "\n".join(lines)
