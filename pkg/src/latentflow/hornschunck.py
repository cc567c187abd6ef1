"""Coarse-to-fine variational optical flow (brightness constancy plus a
quadratic smoothness term, Jacobi relaxation).

The solver works on a block-mean image pyramid. At each level the second
image is warped by the upsampled flow estimate, the constraint is linearized
there, and the classic relaxation

    u <- u_avg - Ix (Ix (u_avg - u0) + Iy (v_avg - v0) + It) / (lam + Ix^2 + Iy^2)

runs a fixed number of iterations on the total field (u0, v0 is the
linearization point). Internally the field is the forward motion of the
first image; callers receive the registration (backward) flow, which
resamples the second image onto the first.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .warp import bilinear_sample

_AVG_KERNEL = np.array([[0.0, 0.25, 0.0],
                        [0.25, 0.0, 0.25],
                        [0.0, 0.25, 0.0]])


def _halve(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = img[:h - h % 2, :w - w % 2]
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _resize_bilinear(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h1, w1 = arr.shape
    h2, w2 = shape
    ys = (np.arange(h2) + 0.5) * h1 / h2 - 0.5
    xs = (np.arange(w2) + 0.5) * w1 / w2 - 0.5
    xg, yg = np.meshgrid(xs, ys)
    return bilinear_sample(arr, xg, yg, "clamp")


def _gradients(a: np.ndarray, b_warped: np.ndarray):
    avg = 0.5 * (a + b_warped)
    ix = ndimage.correlate1d(avg, [-0.5, 0.0, 0.5], axis=1, mode="nearest")
    iy = ndimage.correlate1d(avg, [-0.5, 0.0, 0.5], axis=0, mode="nearest")
    it = b_warped - a
    return ix, iy, it


def _relax(a, b, u0, v0, lam, iterations):
    h, w = a.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    b_warped = bilinear_sample(b, xs + u0, ys + v0, "clamp")
    ix, iy, it = _gradients(a, b_warped)
    den = lam + ix * ix + iy * iy
    u, v = u0.copy(), v0.copy()
    for _ in range(iterations):
        u_avg = ndimage.convolve(u, _AVG_KERNEL, mode="nearest")
        v_avg = ndimage.convolve(v, _AVG_KERNEL, mode="nearest")
        num = ix * (u_avg - u0) + iy * (v_avg - v0) + it
        u = u_avg - ix * num / den
        v = v_avg - iy * num / den
    return u, v


def solve_flow(a: np.ndarray, b: np.ndarray, levels: int = 4,
               iterations: int = 100, smoothness: float = 0.5):
    """Estimate the forward motion field w with a(x) ~ b(x + w(x)).

    ``a`` and ``b`` are 2-D grayscale arrays of equal shape; the returned
    (u, v) pair is the motion of content in ``a``.
    """
    if a.shape != b.shape:
        raise ValueError("images must share dimensions")
    if levels < 1 or iterations < 1:
        raise ValueError("levels and iterations must be positive")
    if smoothness <= 0:
        raise ValueError("smoothness must be positive")

    pyr_a, pyr_b = [a], [b]
    while len(pyr_a) < levels and min(pyr_a[-1].shape) >= 32:
        pyr_a.append(_halve(pyr_a[-1]))
        pyr_b.append(_halve(pyr_b[-1]))

    u = np.zeros(pyr_a[-1].shape)
    v = np.zeros(pyr_a[-1].shape)
    for level in range(len(pyr_a) - 1, -1, -1):
        shape = pyr_a[level].shape
        if u.shape != shape:
            u = _resize_bilinear(u, shape) * 2.0
            v = _resize_bilinear(v, shape) * 2.0
        u, v = _relax(pyr_a[level], pyr_b[level], u, v, smoothness, iterations)
    return u, v
