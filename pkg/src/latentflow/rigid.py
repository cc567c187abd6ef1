"""Rigid-motion flow generators: translation, rotating sphere, radial growth.

The sphere variant lifts every pixel of the projected disk onto the front
hemisphere under orthographic projection (x right, y down, z toward the
viewer), rotates it about an axis through the sphere center (Rodrigues
formula) and reprojects; the flow is the projected displacement. Pixels whose
rotated position lands on the back hemisphere keep that projected flow but
are flagged in the returned occlusion mask: content there leaves the visible
surface and downstream eta maps may regenerate it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import FORWARD, FlowField


@dataclass(frozen=True)
class Translate:
    dx: float
    dy: float


@dataclass(frozen=True)
class SphereRotation:
    center: tuple[float, float]
    radius: float
    axis: tuple[float, float, float]
    dtheta: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        norm = float(np.linalg.norm(self.axis))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError("axis must be a unit 3-vector")


@dataclass(frozen=True)
class RadialGrowth:
    center: tuple[float, float]
    rate: float
    mask: np.ndarray  # (H, W) bool region that grows

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool).copy()
        if mask.ndim != 2:
            raise ValueError("growth mask must be 2-D")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)


RigidMotionSpec = Translate | SphereRotation | RadialGrowth


def rigid_flow(spec: RigidMotionSpec, dims) -> tuple[FlowField, np.ndarray]:
    """Dense forward flow for one frame of rigid motion, plus the occlusion
    mask (nonempty only for sphere rotation)."""
    w, h = int(dims[0]), int(dims[1])
    if w <= 0 or h <= 0:
        raise ValueError("dims must be positive")
    occlusion = np.zeros((h, w), dtype=bool)

    if isinstance(spec, Translate):
        return FlowField.constant(w, h, spec.dx, spec.dy, FORWARD), occlusion

    if isinstance(spec, SphereRotation):
        return _sphere_flow(spec, w, h)

    if isinstance(spec, RadialGrowth):
        if spec.mask.shape != (h, w):
            raise ValueError("growth mask must match dims")
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        dx = xs - spec.center[0]
        dy = ys - spec.center[1]
        r = np.hypot(dx, dy)
        inside = spec.mask & (r > 0)
        u = np.zeros((h, w))
        v = np.zeros((h, w))
        u[inside] = spec.rate * dx[inside] / r[inside]
        v[inside] = spec.rate * dy[inside] / r[inside]
        return FlowField(u, v, FORWARD), occlusion

    raise TypeError(f"unknown rigid motion spec: {type(spec).__name__}")


def _sphere_flow(spec: SphereRotation, w: int, h: int) -> tuple[FlowField, np.ndarray]:
    cx, cy = float(spec.center[0]), float(spec.center[1])
    R = float(spec.radius)
    if cx + R < 0 or cx - R > w - 1 or cy + R < 0 or cy - R > h - 1:
        raise ValueError("sphere disk does not intersect the image")

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    X = xs - cx
    Y = ys - cy
    rr = X * X + Y * Y
    inside = rr <= R * R

    Z = np.sqrt(np.maximum(R * R - rr, 0.0))
    k = np.asarray(spec.axis, dtype=np.float64)
    ct = np.cos(spec.dtheta)
    st = np.sin(spec.dtheta)

    # Rodrigues: P' = P cos t + (k x P) sin t + k (k . P)(1 - cos t)
    kdot = k[0] * X + k[1] * Y + k[2] * Z
    cx_x = k[1] * Z - k[2] * Y
    cx_y = k[2] * X - k[0] * Z
    cx_z = k[0] * Y - k[1] * X
    Xr = X * ct + cx_x * st + k[0] * kdot * (1.0 - ct)
    Yr = Y * ct + cx_y * st + k[1] * kdot * (1.0 - ct)
    Zr = Z * ct + cx_z * st + k[2] * kdot * (1.0 - ct)

    u = np.where(inside, Xr - X, 0.0)
    v = np.where(inside, Yr - Y, 0.0)
    occlusion = inside & (Zr < 0.0)
    return FlowField(u, v, FORWARD), occlusion
