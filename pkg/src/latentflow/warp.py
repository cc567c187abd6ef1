"""Flow-field operations: warping, inversion, resampling, eta derivation,
cosine correlation and patch cloning.

All functions are pure; inputs are immutable value types from
:mod:`latentflow.grids`. Warping consumes *backward* flows only (hole-free
bilinear gathering); simulators emit forward velocity fields which must be
converted with :func:`invert_flow` first.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .grids import BACKWARD, FORWARD, EtaMap, FlowField, TensorGrid

BOUNDARY_MODES = ("clamp", "zero")


def bilinear_sample(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                    boundary: str = "clamp") -> np.ndarray:
    """Sample ``arr`` ((H, W) or (H, W, C)) at real coordinates (xs, ys).

    ``clamp`` replicates edge values outside the grid; ``zero`` treats the
    grid as zero-padded.
    """
    if boundary not in BOUNDARY_MODES:
        raise ValueError(f"boundary must be one of {BOUNDARY_MODES}")
    h, w = arr.shape[:2]
    x0f = np.floor(xs)
    y0f = np.floor(ys)
    fx = xs - x0f
    fy = ys - y0f
    x0 = x0f.astype(np.intp)
    y0 = y0f.astype(np.intp)
    x1 = x0 + 1
    y1 = y0 + 1

    if fx.ndim and arr.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]

    def tap(yi, xi):
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        val = arr[yc, xc]
        if boundary == "zero":
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            if arr.ndim == 3:
                valid = valid[..., None]
            val = np.where(valid, val, 0.0)
        return val

    return ((1 - fx) * (1 - fy) * tap(y0, x0)
            + fx * (1 - fy) * tap(y0, x1)
            + (1 - fx) * fy * tap(y1, x0)
            + fx * fy * tap(y1, x1))


def _check_dims(grid_shape, flow: FlowField, what: str) -> None:
    if grid_shape != flow.shape:
        raise ValueError(f"{what}: flow {flow.shape} does not match grid {grid_shape}")


def warp_backward(grid: TensorGrid, flow: FlowField, boundary: str = "clamp") -> TensorGrid:
    """Resample ``grid`` through a backward flow: out(x, y) = grid(x-u, y-v).

    Zero flow is the bit-exact identity. Raises on dimension mismatch and on
    forward-convention flows (invert those first).
    """
    _check_dims((grid.height, grid.width), flow, "warp_backward")
    if flow.convention != BACKWARD:
        raise ValueError("warp_backward requires a backward flow; apply invert_flow first")
    if not flow.u.any() and not flow.v.any():
        return grid
    h, w = flow.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = bilinear_sample(grid.data, xs - flow.u, ys - flow.v, boundary)
    return TensorGrid(out)


def invert_flow(flow: FlowField) -> FlowField:
    """Convert a forward velocity field into the backward flow used for warping.

    Forward vectors are splatted onto their target pixels with bilinear
    weights; pixels no source reaches (zero accumulated weight) are filled
    from the nearest covered pixel.
    """
    if flow.convention != FORWARD:
        raise ValueError("invert_flow expects a forward flow")
    h, w = flow.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    px = (xs + flow.u).ravel()
    py = (ys + flow.v).ravel()
    vu = flow.u.ravel()
    vv = flow.v.ravel()

    x0 = np.floor(px).astype(np.intp)
    y0 = np.floor(py).astype(np.intp)
    fx = px - x0
    fy = py - y0

    acc_u = np.zeros((h, w))
    acc_v = np.zeros((h, w))
    acc_w = np.zeros((h, w))
    for dy, dx, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                        (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + dx
        yi = y0 + dy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (wgt > 0)
        np.add.at(acc_u, (yi[ok], xi[ok]), vu[ok] * wgt[ok])
        np.add.at(acc_v, (yi[ok], xi[ok]), vv[ok] * wgt[ok])
        np.add.at(acc_w, (yi[ok], xi[ok]), wgt[ok])

    covered = acc_w > 1e-12
    out_u = np.zeros((h, w))
    out_v = np.zeros((h, w))
    out_u[covered] = acc_u[covered] / acc_w[covered]
    out_v[covered] = acc_v[covered] / acc_w[covered]
    if not covered.all() and covered.any():
        # nearest covered pixel fills the holes
        iy, ix = ndimage.distance_transform_edt(~covered, return_distances=False,
                                                return_indices=True)
        out_u = out_u[iy, ix]
        out_v = out_v[iy, ix]
    return FlowField(out_u, out_v, BACKWARD)


def resample_flow(flow: FlowField, factor: int) -> FlowField:
    """Downsample a flow by an integer factor: vectors are block-averaged and
    rescaled so displacement is measured in the coarse grid's pixels."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    if factor == 1:
        return flow
    h, w = flow.shape
    if h % factor or w % factor:
        raise ValueError(f"dimensions {w}x{h} not divisible by factor {factor}")

    def down(a):
        return a.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3)) / factor

    return FlowField(down(flow.u), down(flow.v), flow.convention)


def derive_eta_map(flow: FlowField, discontinuity_threshold: float = 1.0) -> EtaMap:
    """Mark pixels whose backward sample point leaves the grid, or whose flow
    jumps by more than the threshold to any 4-neighbor, with eta = 1.

    Those are the regions where warped content is unreliable and stochastic
    (DDPM-like) resampling should regenerate it.
    """
    if flow.convention != BACKWARD:
        raise ValueError("derive_eta_map expects a backward flow")
    if not discontinuity_threshold > 0:
        raise ValueError("discontinuity_threshold must be > 0")
    h, w = flow.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = xs - flow.u
    sy = ys - flow.v
    mark = (sx < 0) | (sx > w - 1) | (sy < 0) | (sy > h - 1)

    for comp in (flow.u, flow.v):
        jump_x = np.abs(np.diff(comp, axis=1)) > discontinuity_threshold
        jump_y = np.abs(np.diff(comp, axis=0)) > discontinuity_threshold
        mark[:, :-1] |= jump_x
        mark[:, 1:] |= jump_x
        mark[:-1, :] |= jump_y
        mark[1:, :] |= jump_y
    return EtaMap(mark.astype(np.float64))


class FlowCorrelation(NamedTuple):
    value: float
    defined: bool


def cosine_similarity_map(a: FlowField, b: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel cosine of the angle between two flows, plus the mask of
    pixels where both vectors are nonzero; zero outside the mask."""
    if a.shape != b.shape:
        raise ValueError(f"flow dimensions differ: {a.shape} vs {b.shape}")
    na = np.hypot(a.u, a.v)
    nb = np.hypot(b.u, b.v)
    mask = (na > 0) & (nb > 0)
    cos = np.zeros(a.shape)
    dot = a.u * b.u + a.v * b.v
    cos[mask] = dot[mask] / (na[mask] * nb[mask])
    return np.clip(cos, -1.0, 1.0), mask


def flow_cosine_correlation(a: FlowField, b: FlowField) -> FlowCorrelation:
    """Mean cosine similarity over pixels where both flows are nonzero.

    Returns value 0 with ``defined=False`` when no such pixel exists.
    """
    cos, mask = cosine_similarity_map(a, b)
    if not mask.any():
        return FlowCorrelation(0.0, False)
    return FlowCorrelation(float(cos[mask].mean()), True)


def clone_patch(grid: TensorGrid, source_box: Sequence[int],
                targets: Sequence[Sequence[float]]) -> TensorGrid:
    """Paste a copy of ``source_box`` = (x, y, width, height) centered at each
    target position, in order (later targets overwrite earlier ones).

    Pastes are clipped at grid boundaries; an empty target list returns the
    grid unchanged.
    """
    x, y, bw, bh = (int(v) for v in source_box)
    if bw <= 0 or bh <= 0:
        raise ValueError("source box must be non-empty")
    if x < 0 or y < 0 or x + bw > grid.width or y + bh > grid.height:
        raise ValueError("source box outside grid bounds")
    if not targets:
        return grid

    out = grid.data.copy()
    patch = grid.data[y:y + bh, x:x + bw]
    for tx, ty in targets:
        dx0 = int(round(float(tx))) - bw // 2
        dy0 = int(round(float(ty))) - bh // 2
        sx0 = max(0, -dx0)
        sy0 = max(0, -dy0)
        sx1 = min(bw, grid.width - dx0)
        sy1 = min(bh, grid.height - dy0)
        if sx0 >= sx1 or sy0 >= sy1:
            continue
        out[dy0 + sy0:dy0 + sy1, dx0 + sx0:dx0 + sx1] = patch[sy0:sy1, sx0:sx1]
    return TensorGrid(out)
