"""Point-agent flocking with separation, alignment and cohesion steering.

Per step, each agent builds three steering terms from its neighborhood:

- separation: sum of (own - neighbor) position offsets over neighbors closer
  than ``separation_radius``,
- alignment: mean neighbor velocity minus own velocity over neighbors within
  ``perception_radius``,
- cohesion: neighbor centroid minus own position over the same set.

Each term is clipped to ``max_force``, weighted and summed (in that order);
the velocity update is then clipped to ``max_speed``, the position advanced,
and the bounds policy (wrap or reflect) applied.

Neighbor sums use correctly-rounded accumulation (``math.fsum``), so the
result is independent of agent ordering: permuting the agent list permutes
the output exactly. No hidden RNG anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .grids import FORWARD, FlowField

WRAP = "wrap"
REFLECT = "reflect"


@dataclass(frozen=True)
class BoidsParams:
    perception_radius: float = 40.0
    separation_radius: float = 12.0
    w_sep: float = 1.5
    w_align: float = 1.0
    w_coh: float = 1.0
    max_speed: float = 4.0
    max_force: float = 0.3

    def __post_init__(self):
        if self.perception_radius <= 0 or self.separation_radius <= 0:
            raise ValueError("radii must be positive")
        if self.max_speed <= 0 or self.max_force <= 0:
            raise ValueError("max_speed and max_force must be positive")


@dataclass(frozen=True)
class Bounds:
    width: float
    height: float
    policy: str = WRAP

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("bounds must be positive")
        if self.policy not in (WRAP, REFLECT):
            raise ValueError(f"policy must be '{WRAP}' or '{REFLECT}'")


@dataclass(frozen=True)
class BoidsState:
    positions: np.ndarray   # (N, 2)
    velocities: np.ndarray  # (N, 2)
    params: BoidsParams
    bounds: Bounds

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2).copy()
        vel = np.asarray(self.velocities, dtype=np.float64).reshape(-1, 2).copy()
        if pos.shape != vel.shape:
            raise ValueError("positions and velocities must pair up")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise ValueError("non-finite agent state")
        speed = np.hypot(vel[:, 0], vel[:, 1]) if len(vel) else np.zeros(0)
        if len(vel) and speed.max() > self.params.max_speed * (1 + 1e-12):
            raise ValueError("agent speed exceeds max_speed")
        pos.setflags(write=False)
        vel.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "velocities", vel)

    def __len__(self) -> int:
        return len(self.positions)


class AgentMotion(NamedTuple):
    """An agent's pre-step position and its displacement this frame."""
    position: tuple[float, float]
    displacement: tuple[float, float]


def _clip(x: float, y: float, cap: float) -> tuple[float, float]:
    m = math.hypot(x, y)
    if m > cap:
        s = cap / m
        return x * s, y * s
    return x, y


def _apply_bounds(x: float, vx: float, size: float, policy: str) -> tuple[float, float]:
    if policy == WRAP:
        return x % size, vx
    if x < 0.0:
        return -x, -vx
    if x > size:
        return 2.0 * size - x, -vx
    return x, vx


def boids_step(state: BoidsState) -> tuple[BoidsState, list[AgentMotion]]:
    """Advance every agent one step; returns the new state plus per-agent
    (pre-step position, displacement) pairs for flow rasterization."""
    n = len(state)
    if n == 0:
        return state, []
    p = state.positions
    v = state.velocities
    prm = state.params

    new_p = np.empty_like(p)
    new_v = np.empty_like(v)
    motions: list[AgentMotion] = []
    for i in range(n):
        sep_x, sep_y = [], []
        per_vx, per_vy, per_px, per_py = [], [], [], []
        for j in range(n):
            if j == i:
                continue
            d = math.hypot(p[j, 0] - p[i, 0], p[j, 1] - p[i, 1])
            if d < prm.separation_radius and d > 0.0:
                sep_x.append(p[i, 0] - p[j, 0])
                sep_y.append(p[i, 1] - p[j, 1])
            if d < prm.perception_radius and d > 0.0:
                per_vx.append(v[j, 0])
                per_vy.append(v[j, 1])
                per_px.append(p[j, 0])
                per_py.append(p[j, 1])

        sep = _clip(math.fsum(sep_x), math.fsum(sep_y), prm.max_force)
        if per_vx:
            k = len(per_vx)
            align = _clip(math.fsum(per_vx) / k - v[i, 0],
                          math.fsum(per_vy) / k - v[i, 1], prm.max_force)
            coh = _clip(math.fsum(per_px) / k - p[i, 0],
                        math.fsum(per_py) / k - p[i, 1], prm.max_force)
        else:
            align = (0.0, 0.0)
            coh = (0.0, 0.0)

        steer_x = prm.w_sep * sep[0] + prm.w_align * align[0] + prm.w_coh * coh[0]
        steer_y = prm.w_sep * sep[1] + prm.w_align * align[1] + prm.w_coh * coh[1]
        vx, vy = _clip(v[i, 0] + steer_x, v[i, 1] + steer_y, prm.max_speed)
        step = (vx, vy)  # displacement before the bounds fold

        x, vx = _apply_bounds(p[i, 0] + vx, vx, state.bounds.width, state.bounds.policy)
        y, vy = _apply_bounds(p[i, 1] + vy, vy, state.bounds.height, state.bounds.policy)
        new_p[i] = (x, y)
        new_v[i] = (vx, vy)
        motions.append(AgentMotion((float(p[i, 0]), float(p[i, 1])), step))

    new_state = replace(state, positions=new_p, velocities=new_v)
    return new_state, motions


def rasterize_agent_flow(displacements, patch_radius: float, dims) -> FlowField:
    """Write each agent's displacement into a disk around its position;
    overlapping disks are averaged, everything else stays zero."""
    if patch_radius < 1:
        raise ValueError("patch_radius must be >= 1")
    w, h = int(dims[0]), int(dims[1])
    acc_u = np.zeros((h, w))
    acc_v = np.zeros((h, w))
    count = np.zeros((h, w))
    ys, xs = np.mgrid[0:h, 0:w]
    for pos, disp in displacements:
        px, py = float(pos[0]), float(pos[1])
        mask = (xs - px) ** 2 + (ys - py) ** 2 <= patch_radius ** 2
        acc_u[mask] += disp[0]
        acc_v[mask] += disp[1]
        count[mask] += 1.0
    hit = count > 0
    out_u = np.zeros((h, w))
    out_v = np.zeros((h, w))
    out_u[hit] = acc_u[hit] / count[hit]
    out_v[hit] = acc_v[hit] / count[hit]
    return FlowField(out_u, out_v, FORWARD)
