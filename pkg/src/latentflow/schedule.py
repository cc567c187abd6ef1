"""Noise schedules: cumulative signal levels and the inference-time subset.

A schedule carries the full training-resolution ``alpha_bar`` sequence (the
running product of per-step signal retention 1 - beta), the strictly
increasing subset of timesteps used at inference, and the inversion depth
``tau`` (snapped onto that subset).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SPACINGS = ("linear", "sqrt_space")


@dataclass(frozen=True)
class NoiseSchedule:
    t_train: int
    alpha_bar: np.ndarray     # (t_train,), strictly decreasing in (0, 1)
    step_indices: np.ndarray  # strictly increasing ints within [0, t_train)
    tau: int

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64).copy()
        steps = np.asarray(self.step_indices, dtype=np.int64).copy()
        if ab.ndim != 1 or len(ab) != self.t_train:
            raise ValueError("alpha_bar length must equal t_train")
        if ab.min() <= 0.0 or ab.max() >= 1.0:
            raise ValueError("alpha_bar values must lie in (0, 1)")
        if not np.all(np.diff(ab) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if steps.ndim != 1 or len(steps) == 0:
            raise ValueError("step_indices must be a non-empty 1-D sequence")
        if not np.all(np.diff(steps) > 0):
            raise ValueError("step_indices must be strictly increasing")
        if steps[0] < 0 or steps[-1] >= self.t_train:
            raise ValueError("step_indices out of range")
        if int(self.tau) not in set(int(s) for s in steps):
            raise ValueError("tau must be one of step_indices")
        ab.setflags(write=False)
        steps.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "step_indices", steps)
        object.__setattr__(self, "tau", int(self.tau))

    @property
    def n_steps(self) -> int:
        return len(self.step_indices)

    def contains(self, t: int) -> bool:
        return bool(np.any(self.step_indices == t))

    def inversion_pairs(self) -> list[tuple[int, int]]:
        """(t_from, t_to) pairs climbing from the first step index to tau."""
        steps = [int(s) for s in self.step_indices if s <= self.tau]
        return list(zip(steps[:-1], steps[1:]))

    def generation_pairs(self) -> list[tuple[int, int]]:
        """(t_from, t_to) pairs descending from tau to the first step index."""
        return [(b, a) for a, b in reversed(self.inversion_pairs())]


def make_schedule(t_train: int = 1000, beta_start: float = 8.5e-4,
                  beta_end: float = 1.2e-2, spacing: str = "sqrt_space",
                  n_steps: int = 200, tau: int = 400) -> NoiseSchedule:
    """Build a schedule with interpolated betas and a uniform inference subset.

    ``sqrt_space`` interpolates linearly between sqrt(beta_start) and
    sqrt(beta_end) before squaring; ``tau`` snaps to the nearest step index
    at or below the requested value.
    """
    if t_train < 2:
        raise ValueError("t_train must be at least 2")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError("need 0 < beta_start < beta_end < 1")
    if not (1 <= n_steps <= t_train):
        raise ValueError("n_steps must lie in [1, t_train]")
    if not (0 <= tau < t_train):
        raise ValueError("tau out of range")
    if spacing == "linear":
        betas = np.linspace(beta_start, beta_end, t_train)
    elif spacing == "sqrt_space":
        betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), t_train) ** 2
    else:
        raise ValueError(f"spacing must be one of {SPACINGS}")

    alpha_bar = np.cumprod(1.0 - betas)
    steps = np.unique(np.round(np.linspace(0, t_train - 1, n_steps)).astype(np.int64))
    at_or_below = steps[steps <= tau]
    if len(at_or_below) == 0:
        raise ValueError("tau below the first step index")
    return NoiseSchedule(t_train, alpha_bar, steps, int(at_or_below[-1]))
