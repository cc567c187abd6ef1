"""Incompressible smoke solver on a staggered (MAC) grid.

Features
--------
- Operator splitting per step, in order: semi-Lagrangian advection of
  velocity and smoke density (single Euler backtrace, bilinear sampling),
  buoyancy forcing, optional implicit viscous diffusion (Jacobi), pressure
  projection.
- Pressure Poisson equation with pure-Neumann boundaries at domain walls and
  obstacle cells, solved matrix-free by conjugate gradients until the
  max-norm divergence drops below tolerance or the iteration cap is hit
  (the returned state carries a convergence flag; never an error).
- Free-slip obstacles: normal velocity is pinned to zero on every face of a
  solid cell, tangential flow along surfaces is untouched.
- Multiple smoke species, each with its own buoyancy vector, sharing one
  velocity field; total density is their sum and stays non-negative.
- NumPy only, deterministic (fixed reduction order, no hidden RNG).

Grid layout
-----------
Cell (i, j) is centered at (x=j, y=i) with unit cell size. Horizontal face
velocities ``u`` have shape (H, W+1) with ``u[i, j]`` on the west face of
cell (i, j); vertical face velocities ``v`` have shape (H+1, W) with
``v[i, j]`` on the north face. The outermost faces are solid domain walls.
Steps consume a state and return a fresh one; arrays are immutable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .grids import FORWARD, FlowField
from .warp import bilinear_sample

DEFAULT_PRESSURE_TOL = 1e-4
DEFAULT_PRESSURE_CAP = 400


class PressureSolveWarning(UserWarning):
    """Pressure projection hit its iteration cap before reaching tolerance."""


def _locked(arr, dtype=np.float64):
    out = np.asarray(arr, dtype=dtype).copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class FluidState:
    """Immutable solver state. ``densities``/``buoyancies`` hold one entry per
    smoke species; ``density`` exposes their sum."""

    u: np.ndarray                      # (H, W+1) horizontal face velocities
    v: np.ndarray                      # (H+1, W) vertical face velocities
    densities: tuple[np.ndarray, ...]  # each (H, W), >= 0
    buoyancies: tuple[np.ndarray, ...]  # each (2,), force per unit density
    obstacles: np.ndarray              # (H, W) bool, True = solid
    viscosity: float = 0.0
    dt: float = 1.0
    pressure_tol: float = DEFAULT_PRESSURE_TOL
    pressure_cap: int = DEFAULT_PRESSURE_CAP
    pressure_converged: bool = True

    def __post_init__(self):
        obstacles = np.asarray(self.obstacles, dtype=bool).copy()
        if obstacles.ndim != 2:
            raise ValueError("obstacles must be a 2-D boolean grid")
        h, w = obstacles.shape
        u = _locked(self.u)
        v = _locked(self.v)
        if u.shape != (h, w + 1) or v.shape != (h + 1, w):
            raise ValueError(f"staggered velocity shapes must be {(h, w + 1)} / "
                             f"{(h + 1, w)}, got {u.shape} / {v.shape}")
        densities = tuple(_locked(d) for d in self.densities)
        buoyancies = tuple(_locked(b) for b in self.buoyancies)
        if len(densities) != len(buoyancies):
            raise ValueError("densities and buoyancies must pair up")
        for d in densities:
            if d.shape != (h, w):
                raise ValueError("density shape mismatch")
            if d.min() < 0:
                raise ValueError("density must be non-negative")
        for b in buoyancies:
            if b.shape != (2,):
                raise ValueError("buoyancy must be a 2-vector")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("velocity contains non-finite values")
        obstacles.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "densities", densities)
        object.__setattr__(self, "buoyancies", buoyancies)
        object.__setattr__(self, "obstacles", obstacles)

    @property
    def height(self) -> int:
        return self.obstacles.shape[0]

    @property
    def width(self) -> int:
        return self.obstacles.shape[1]

    @property
    def density(self) -> np.ndarray:
        total = np.zeros(self.obstacles.shape)
        for d in self.densities:
            total += d
        return total

    def cell_velocity(self) -> tuple[np.ndarray, np.ndarray]:
        """Face velocities averaged to cell centers."""
        uc = 0.5 * (self.u[:, :-1] + self.u[:, 1:])
        vc = 0.5 * (self.v[:-1, :] + self.v[1:, :])
        return uc, vc


def fluid_init_from_mask(mask, obstacles=None, buoyancy=(0.0, 0.0), *,
                         viscosity: float = 0.0, dt: float = 1.0,
                         pressure_tol: float = DEFAULT_PRESSURE_TOL,
                         pressure_cap: int = DEFAULT_PRESSURE_CAP) -> FluidState:
    """Build a state at rest with unit smoke density on ``mask``.

    Raises if the smoke mask overlaps an obstacle cell.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError("mask must be a 2-D boolean grid")
    h, w = mask.shape
    if obstacles is None:
        obstacles = np.zeros((h, w), dtype=bool)
    obstacles = np.asarray(obstacles, dtype=bool)
    if obstacles.shape != mask.shape:
        raise ValueError("mask and obstacles must share dimensions")
    if (mask & obstacles).any():
        raise ValueError("smoke mask overlaps obstacle cells")
    return FluidState(
        u=np.zeros((h, w + 1)),
        v=np.zeros((h + 1, w)),
        densities=(mask.astype(np.float64),),
        buoyancies=(np.asarray(buoyancy, dtype=np.float64),),
        obstacles=obstacles,
        viscosity=viscosity,
        dt=dt,
        pressure_tol=pressure_tol,
        pressure_cap=pressure_cap,
    )


def add_smoke_species(state: FluidState, mask, buoyancy) -> FluidState:
    """Add another smoke species (own buoyancy vector) to an existing state."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != state.obstacles.shape:
        raise ValueError("mask dimensions must match the state")
    if (mask & state.obstacles).any():
        raise ValueError("smoke mask overlaps obstacle cells")
    return replace(state,
                   densities=state.densities + (mask.astype(np.float64),),
                   buoyancies=state.buoyancies + (np.asarray(buoyancy, np.float64),))


# --- face masks ------------------------------------------------------------


def _solid_u_faces(obstacles: np.ndarray) -> np.ndarray:
    """(H, W+1) mask of u-faces adjacent to a solid cell or a domain wall."""
    h, w = obstacles.shape
    solid = np.zeros((h, w + 1), dtype=bool)
    solid[:, 0] = True
    solid[:, -1] = True
    solid[:, :-1] |= obstacles
    solid[:, 1:] |= obstacles
    return solid


def _solid_v_faces(obstacles: np.ndarray) -> np.ndarray:
    h, w = obstacles.shape
    solid = np.zeros((h + 1, w), dtype=bool)
    solid[0, :] = True
    solid[-1, :] = True
    solid[:-1, :] |= obstacles
    solid[1:, :] |= obstacles
    return solid


def _enforce_solid(u, v, obstacles):
    u[_solid_u_faces(obstacles)] = 0.0
    v[_solid_v_faces(obstacles)] = 0.0


# --- sampling on the staggered grid ----------------------------------------


def _sample_u(u, xs, ys):
    # u[i, j] sits at (x = j - 0.5, y = i)
    return bilinear_sample(u, xs + 0.5, ys, "clamp")


def _sample_v(v, xs, ys):
    # v[i, j] sits at (x = j, y = i - 0.5)
    return bilinear_sample(v, xs, ys + 0.5, "clamp")


def divergence(state: FluidState) -> np.ndarray:
    """Net outflow per cell; zero reported inside obstacles."""
    div = (state.u[:, 1:] - state.u[:, :-1]) + (state.v[1:, :] - state.v[:-1, :])
    div[state.obstacles] = 0.0
    return div


def _project(u, v, obstacles, tol, cap):
    """Remove the divergent velocity component. Returns (iterations, converged).

    Solves A p = div by conjugate gradients where A is the 5-point Laplacian
    over fluid cells with Neumann boundaries (A = div o grad exactly on this
    staggered layout, so the CG residual *is* the post-correction divergence).
    """
    h, w = obstacles.shape
    fluid = ~obstacles
    div = (u[:, 1:] - u[:, :-1]) + (v[1:, :] - v[:-1, :])
    div[obstacles] = 0.0

    # connectivity: faces between two fluid cells
    open_x = fluid[:, :-1] & fluid[:, 1:]   # (H, W-1)
    open_y = fluid[:-1, :] & fluid[1:, :]   # (H-1, W)
    degree = np.zeros((h, w))
    degree[:, :-1] += open_x
    degree[:, 1:] += open_x
    degree[:-1, :] += open_y
    degree[1:, :] += open_y

    def apply_neg_lap(p):
        out = degree * p
        out[:, :-1] -= np.where(open_x, p[:, 1:], 0.0)
        out[:, 1:] -= np.where(open_x, p[:, :-1], 0.0)
        out[:-1, :] -= np.where(open_y, p[1:, :], 0.0)
        out[1:, :] -= np.where(open_y, p[:-1, :], 0.0)
        out[obstacles] = 0.0
        return out

    b = -div  # A = -Laplacian is positive semidefinite
    p = np.zeros((h, w))
    r = b.copy()
    iterations = 0
    converged = bool(np.abs(r).max() <= tol)
    if not converged:
        d = r.copy()
        rs = float((r * r).sum())
        for iterations in range(1, cap + 1):
            ad = apply_neg_lap(d)
            dad = float((d * ad).sum())
            if dad <= 0.0:
                break
            alpha = rs / dad
            p += alpha * d
            r -= alpha * ad
            if np.abs(r).max() <= tol:
                converged = True
                break
            rs_new = float((r * r).sum())
            d = r + (rs_new / rs) * d
            rs = rs_new

    # v <- v - grad p across open faces only
    u[:, 1:-1] -= np.where(open_x, p[:, 1:] - p[:, :-1], 0.0)
    v[1:-1, :] -= np.where(open_y, p[1:, :] - p[:-1, :], 0.0)
    _enforce_solid(u, v, obstacles)
    return iterations, converged


def _diffuse(field, solid_faces, a, iters=40):
    """Implicit diffusion (I - a * Laplacian) x = field via Jacobi sweeps with
    edge replication; solid faces stay pinned at zero."""
    x = field.copy()
    x[solid_faces] = 0.0
    for _ in range(iters):
        padded = np.pad(x, 1, mode="edge")
        nbr = (padded[:-2, 1:-1] + padded[2:, 1:-1]
               + padded[1:-1, :-2] + padded[1:-1, 2:])
        x = (field + a * nbr) / (1.0 + 4.0 * a)
        x[solid_faces] = 0.0
    return x


def fluid_step(state: FluidState) -> tuple[FluidState, FlowField]:
    """Advance one step; returns the new state and the pre-step cell-centered
    velocity times dt as a forward optical flow."""
    h, w = state.obstacles.shape
    dt = state.dt
    obstacles = state.obstacles
    uc, vc = state.cell_velocity()
    flow = FlowField(uc * dt, vc * dt, FORWARD)

    u = state.u.copy()
    v = state.v.copy()
    _enforce_solid(u, v, obstacles)

    # 1) semi-Lagrangian advection (single Euler backtrace, bilinear taps)
    yju, xju = np.mgrid[0:h, 0:w + 1].astype(np.float64)
    xu = xju - 0.5
    yu = yju
    vu = _sample_v(v, xu, yu)
    u_adv = _sample_u(u, xu - u * dt, yu - vu * dt)

    yjv, xjv = np.mgrid[0:h + 1, 0:w].astype(np.float64)
    xv = xjv
    yv = yjv - 0.5
    uv = _sample_u(u, xv, yv)
    v_adv = _sample_v(v, xv - uv * dt, yv - v * dt)

    u, v = u_adv, v_adv
    _enforce_solid(u, v, obstacles)

    yc, xc = np.mgrid[0:h, 0:w].astype(np.float64)
    src_x = xc - uc * dt
    src_y = yc - vc * dt
    new_densities = []
    for dens in state.densities:
        nd = bilinear_sample(dens, src_x, src_y, "clamp")
        nd[obstacles] = 0.0
        np.clip(nd, 0.0, None, out=nd)
        new_densities.append(nd)

    # 2) buoyancy: force per unit density, applied on faces with the density
    #    averaged from the two adjacent cells
    for dens, buoy in zip(new_densities, state.buoyancies):
        bx, by = float(buoy[0]), float(buoy[1])
        if bx != 0.0:
            rho_u = 0.5 * (dens[:, :-1] + dens[:, 1:])
            u[:, 1:-1] += bx * rho_u * dt
        if by != 0.0:
            rho_v = 0.5 * (dens[:-1, :] + dens[1:, :])
            v[1:-1, :] += by * rho_v * dt
    _enforce_solid(u, v, obstacles)

    # 3) optional viscous diffusion (implicit Jacobi)
    if state.viscosity > 0.0:
        a = state.viscosity * dt
        u = _diffuse(u, _solid_u_faces(obstacles), a)
        v = _diffuse(v, _solid_v_faces(obstacles), a)

    # 4) pressure projection
    _, converged = _project(u, v, obstacles, state.pressure_tol, state.pressure_cap)
    if not converged:
        warnings.warn("pressure projection stopped at the iteration cap",
                      PressureSolveWarning, stacklevel=2)

    new_state = replace(state, u=u, v=v, densities=tuple(new_densities),
                        pressure_converged=converged)
    return new_state, flow
