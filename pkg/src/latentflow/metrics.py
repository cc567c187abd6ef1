"""Image and video quality metrics: dense flow estimation, SSIM, and the
motion-compensated consistency score, plus the cross-resolution flow
correlation experiment.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import hornschunck
from .grids import BACKWARD, FlowField, TensorGrid
from .warp import (cosine_similarity_map, flow_cosine_correlation,
                   resample_flow, warp_backward)

GRAY_WEIGHTS = (0.299, 0.587, 0.114)  # ITU-R 601 luma

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class LowConfidenceWarning(UserWarning):
    """The flow estimate is degenerate (e.g. constant images)."""


@dataclass(frozen=True)
class ImagePair:
    """Two equal-sized frames with 1 or 3 channels, clamped to [0, 1]."""

    a: TensorGrid
    b: TensorGrid

    def __post_init__(self):
        a, b = self.a, self.b
        if (a.height, a.width, a.channels) != (b.height, b.width, b.channels):
            raise ValueError("frames must share dimensions")
        if a.channels not in (1, 3):
            raise ValueError("frames must have 1 or 3 channels")
        object.__setattr__(self, "a", TensorGrid(np.clip(a.data, 0.0, 1.0)))
        object.__setattr__(self, "b", TensorGrid(np.clip(b.data, 0.0, 1.0)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.a.height, self.a.width


def to_gray(grid: TensorGrid) -> np.ndarray:
    if grid.channels == 1:
        return grid.plane(0)
    r, g, b = (grid.plane(i) for i in range(3))
    return GRAY_WEIGHTS[0] * r + GRAY_WEIGHTS[1] * g + GRAY_WEIGHTS[2] * b


def estimate_flow(pair: ImagePair, levels: int = 4, iterations: int = 100,
                  smoothness: float = 0.5) -> FlowField:
    """Registration flow from the second frame back onto the first:
    ``warp_backward(pair.b, flow)`` approximates ``pair.a``.

    Constant (gradient-free) inputs yield a zero flow and a
    :class:`LowConfidenceWarning`.
    """
    h, w = pair.shape
    if h < 16 or w < 16:
        raise ValueError("images must be at least 16x16")
    a = to_gray(pair.a)
    b = to_gray(pair.b)
    if np.ptp(a) == 0.0 and np.ptp(b) == 0.0:
        warnings.warn("constant images carry no motion information",
                      LowConfidenceWarning, stacklevel=2)
        return FlowField.zeros(w, h, BACKWARD)
    u, v = hornschunck.solve_flow(a, b, levels, iterations, smoothness)
    return FlowField(-u, -v, BACKWARD)


def _ssim_plane(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    half = SSIM_WINDOW // 2
    offsets = np.arange(SSIM_WINDOW) - half
    kernel = np.exp(-(offsets ** 2) / (2.0 * SSIM_SIGMA ** 2))
    kernel /= kernel.sum()

    def blur(img):
        out = ndimage.correlate1d(img, kernel, axis=0, mode="constant")
        return ndimage.correlate1d(out, kernel, axis=1, mode="constant")

    mu_x = blur(x)
    mu_y = blur(y)
    xx = blur(x * x) - mu_x * mu_x
    yy = blur(y * y) - mu_y * mu_y
    xy = blur(x * y) - mu_x * mu_y
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)
                / ((mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)))
    return ssim_map[half:-half, half:-half]  # crop the zero-padded border


def ssim(pair: ImagePair) -> float:
    """Mean local structural similarity (11x11 Gaussian window, sigma 1.5,
    K1 = 0.01, K2 = 0.03, dynamic range 1); channel-averaged for color."""
    h, w = pair.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    vals = [_ssim_plane(pair.a.plane(c), pair.b.plane(c)).mean()
            for c in range(pair.a.channels)]
    return float(np.mean(vals))


def motion_consistency(frames) -> float:
    """Mean motion-compensated similarity over consecutive frame pairs: the
    later frame is registered back onto the earlier one through the estimated
    flow, then scored with SSIM."""
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    scores = []
    for a, b in zip(frames[:-1], frames[1:]):
        pair = ImagePair(a, b)
        flow = estimate_flow(pair)
        registered = warp_backward(pair.b, flow, "clamp")
        scores.append(ssim(ImagePair(pair.a, registered)))
    return float(np.mean(scores))


@dataclass(frozen=True)
class CorrelationReport:
    per_pair: list[float]
    defined: list[bool]
    mean: float
    heatmaps: list[np.ndarray]

    def to_dict(self) -> dict:
        return {"per_pair": self.per_pair, "defined": self.defined, "mean": self.mean}


def _normalize_pair(a: TensorGrid, b: TensorGrid) -> ImagePair:
    """Map two latent grids jointly onto [0, 1] and reduce to one channel, so
    arbitrary-range multi-channel latents fit the estimator's input domain."""
    xa = a.data.mean(axis=2) if a.channels not in (1, 3) else a.data
    xb = b.data.mean(axis=2) if b.channels not in (1, 3) else b.data
    lo = min(xa.min(), xb.min())
    hi = max(xa.max(), xb.max())
    span = hi - lo if hi > lo else 1.0
    return ImagePair(TensorGrid((xa - lo) / span), TensorGrid((xb - lo) / span))


def correlation_experiment(rgb_pairs, latent_pairs) -> CorrelationReport:
    """Cosine correlation between flows estimated on image pairs and on the
    corresponding latent pairs; image-resolution flows are resampled down to
    the latent grid before comparison."""
    rgb_pairs = list(rgb_pairs)
    latent_pairs = list(latent_pairs)
    if len(rgb_pairs) != len(latent_pairs):
        raise ValueError("need one latent pair per image pair")
    per_pair, defined, heatmaps = [], [], []
    for pair, (la, lb) in zip(rgb_pairs, latent_pairs):
        la = la if isinstance(la, TensorGrid) else TensorGrid(la)
        lb = lb if isinstance(lb, TensorGrid) else TensorGrid(lb)
        h, w = pair.shape
        if h % la.height or w % la.width or h // la.height != w // la.width:
            raise ValueError("latent grid must evenly divide the image grid")
        factor = h // la.height

        rgb_flow = resample_flow(estimate_flow(pair), factor)
        lat_flow = estimate_flow(_normalize_pair(la, lb))
        corr = flow_cosine_correlation(rgb_flow, lat_flow)
        cos_map, _ = cosine_similarity_map(rgb_flow, lat_flow)
        per_pair.append(corr.value)
        defined.append(corr.defined)
        heatmaps.append(cos_map)
    valid = [v for v, d in zip(per_pair, defined) if d]
    mean = float(np.mean(valid)) if valid else 0.0
    return CorrelationReport(per_pair, defined, mean, heatmaps)
