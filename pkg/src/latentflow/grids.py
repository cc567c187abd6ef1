"""Core grid types: dense flow fields, multi-channel tensor grids, eta maps.

Conventions
-----------
- Arrays are row-major with ``[y, x]`` indexing; x grows rightward, y grows
  downward. Flow components are ``u`` (horizontal, px/frame, positive
  rightward) and ``v`` (vertical, px/frame, positive downward).
- A *backward* flow stored at pixel (x, y) locates that pixel's source:
  resampling reads the input at ``(x - u, y - v)``. A *forward* flow stored
  at (x, y) is the displacement of the content currently at (x, y).
- All values are kept as float64 in memory; file formats are float32.

File formats
------------
- Flow fields: Middlebury ``.flo`` (little-endian float32 magic 202021.25,
  int32 width, int32 height, interleaved row-major float32 (u, v) pairs).
- Tensor grids / eta maps: NPY version 1.0, float32, shape
  (height, width, channels) respectively (height, width).

Both round-trip bit-exactly for float32-valued data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FLO_MAGIC = np.float32(202021.25)

BACKWARD = "backward"
FORWARD = "forward"
_CONVENTIONS = (BACKWARD, FORWARD)


def _as_float_plane(arr, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {out.shape}")
    if out.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite values")
    out = out.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class FlowField:
    """Dense 2-D displacement field with an explicit direction convention.

    The convention tag is fixed at construction; operations that require one
    direction reject the other instead of silently reinterpreting it.
    """

    u: np.ndarray
    v: np.ndarray
    convention: str = BACKWARD

    def __post_init__(self):
        u = _as_float_plane(self.u, "u")
        v = _as_float_plane(self.v, "v")
        if u.shape != v.shape:
            raise ValueError(f"u/v shape mismatch: {u.shape} vs {v.shape}")
        if self.convention not in _CONVENTIONS:
            raise ValueError(f"convention must be one of {_CONVENTIONS}")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    @classmethod
    def zeros(cls, width: int, height: int, convention: str = BACKWARD) -> "FlowField":
        z = np.zeros((height, width))
        return cls(z, z, convention)

    @classmethod
    def constant(cls, width: int, height: int, u: float, v: float,
                 convention: str = BACKWARD) -> "FlowField":
        return cls(np.full((height, width), float(u)),
                   np.full((height, width), float(v)), convention)

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)

    def flo_bytes(self) -> bytes:
        """Serialize as Middlebury .flo (little-endian, float32)."""
        h, w = self.u.shape
        data = np.empty((h, w, 2), dtype="<f4")
        data[..., 0] = self.u
        data[..., 1] = self.v
        return (FLO_MAGIC.astype("<f4").tobytes()
                + np.array([w, h], dtype="<i4").tobytes()
                + data.tobytes())

    def save_flo(self, path) -> None:
        """Write Middlebury .flo (little-endian, float32)."""
        with open(path, "wb") as f:
            f.write(self.flo_bytes())

    @classmethod
    def load_flo(cls, path, convention: str = BACKWARD) -> "FlowField":
        """Read Middlebury .flo. The format carries no direction tag, so the
        caller states the convention (emitted artifacts are backward flows).
        """
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < 12:
            raise ValueError(f"{path}: truncated .flo file")
        magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
        if magic != FLO_MAGIC:
            raise ValueError(f"{path}: bad .flo magic {magic!r}")
        w, h = np.frombuffer(raw, dtype="<i4", count=2, offset=4)
        expect = 12 + 8 * int(w) * int(h)
        if w <= 0 or h <= 0 or len(raw) != expect:
            raise ValueError(f"{path}: corrupt .flo header ({w}x{h}, {len(raw)} bytes)")
        data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(int(h), int(w), 2)
        return cls(data[..., 0], data[..., 1], convention)


@dataclass(frozen=True)
class TensorGrid:
    """Multi-channel 2-D grid of real values, shape (height, width, channels).

    Holds diffusion latents, noise estimates and decoded images alike.
    2-D input is promoted to a single channel.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"data must be (H, W) or (H, W, C), got {arr.shape}")
        if arr.size == 0:
            raise ValueError("data must be non-empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("data contains non-finite values")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def plane(self, c: int = 0) -> np.ndarray:
        return self.data[:, :, c]

    def save_npy(self, path) -> None:
        _write_npy_f32(path, self.data)

    @classmethod
    def load_npy(cls, path) -> "TensorGrid":
        return cls(_read_npy(path, ndim=3))


@dataclass(frozen=True)
class EtaMap:
    """Per-pixel eta in [0, 1] selecting deterministic (0) vs stochastic (1)
    sampling; dimensions match the latent grid it modulates."""

    eta: np.ndarray

    def __post_init__(self):
        eta = _as_float_plane(self.eta, "eta")
        if eta.min() < 0.0 or eta.max() > 1.0:
            raise ValueError("eta values must lie in [0, 1]")
        object.__setattr__(self, "eta", eta)

    @property
    def height(self) -> int:
        return self.eta.shape[0]

    @property
    def width(self) -> int:
        return self.eta.shape[1]

    @classmethod
    def zeros(cls, width: int, height: int) -> "EtaMap":
        return cls(np.zeros((height, width)))

    def save_npy(self, path) -> None:
        _write_npy_f32(path, self.eta)

    @classmethod
    def load_npy(cls, path) -> "EtaMap":
        return cls(_read_npy(path, ndim=2))


def _write_npy_f32(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        np.lib.format.write_array(f, np.ascontiguousarray(arr, dtype=np.float32),
                                  version=(1, 0))


def _read_npy(path, ndim: int) -> np.ndarray:
    arr = np.load(path)
    if arr.ndim != ndim:
        raise ValueError(f"{path}: expected {ndim}-D array, got shape {arr.shape}")
    return np.asarray(arr, dtype=np.float64)
