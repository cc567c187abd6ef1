"""Diffusion sampling machinery: DDIM stepping with per-pixel eta, DDIM
inversion, classifier-free guidance, cross-frame attention over a list of
latents, and the autoregressive frame-generation loop.

The loop is verified against an analytic denoiser that computes the exact
minimum-MSE noise estimate for a Gaussian data distribution, so every piece
of the sampling mathematics is testable without any neural network.

Randomness comes from counter-based Philox streams keyed by
(seed, frame, timestep, purpose), making runs reproducible and the frame
loop resumable: a checkpoint only needs the frame index plus the first and
previous frames.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .grids import BACKWARD, EtaMap, FlowField, TensorGrid
from .schedule import NoiseSchedule
from .warp import warp_backward

ATTEND_SETS = ("self", "first", "previous", "first_and_previous")

_PURPOSE_STEP = 0
_PURPOSE_ATTEND_FIRST = 1
_PURPOSE_ATTEND_PREV = 2
_PURPOSE_FRESH = 3


class VarianceClampWarning(UserWarning):
    """The deterministic-direction coefficient went (numerically) negative."""


class Denoiser(Protocol):
    """Noise estimator: maps a latent at timestep t to the noise it contains.

    ``conditioning`` is an opaque handle (one branch of a prompt pair);
    ``attend`` lists the latents whose keys/values the estimator may attend
    to. Implementations must be deterministic in their inputs and return a
    grid of the input's dimensions.
    """

    def __call__(self, z: TensorGrid, t: int, conditioning=None,
                 attend: Sequence[TensorGrid] = ()) -> TensorGrid: ...


@dataclass(frozen=True)
class EtaPolicy:
    """Scalar eta, or per-frame spatial maps supplied alongside the flows."""
    kind: str
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("scalar", "spatial"):
            raise ValueError("eta policy kind must be 'scalar' or 'spatial'")
        if self.kind == "scalar" and not (0.0 <= self.value <= 1.0):
            raise ValueError("scalar eta must lie in [0, 1]")

    @classmethod
    def scalar(cls, value: float) -> "EtaPolicy":
        return cls("scalar", float(value))

    @classmethod
    def spatial(cls) -> "EtaPolicy":
        return cls("spatial")


@dataclass(frozen=True)
class SamplerParams:
    gamma: float = 7.5
    eta_policy: EtaPolicy = field(default_factory=EtaPolicy.spatial)
    attend_set: str = "first_and_previous"
    seed: int = 0
    use_inversion: bool = True

    def __post_init__(self):
        if not np.isfinite(self.gamma):
            raise ValueError("gamma must be finite")
        if self.attend_set not in ATTEND_SETS:
            raise ValueError(f"attend_set must be one of {ATTEND_SETS}")


@dataclass(frozen=True)
class PromptPair:
    """Opaque conditioning handle holding the positive and negative branches."""
    positive: object = None
    negative: object = None


def stream_rng(seed: int, frame: int, timestep: int, purpose: int = _PURPOSE_STEP):
    """Counter-based Philox generator for one (frame, timestep) substream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(frame), int(timestep), int(purpose)))
    return np.random.Generator(np.random.Philox(ss))


# --- elementary operations ---------------------------------------------------


def ddim_sigma(schedule: NoiseSchedule, t_from: int, t_to: int, eta):
    """Stochasticity scale for a t_from -> t_to step; eta may be per-pixel."""
    ab_from = schedule.alpha_bar[t_from]
    ab_to = schedule.alpha_bar[t_to]
    base = np.sqrt((1.0 - ab_to) / (1.0 - ab_from)) * np.sqrt(1.0 - ab_from / ab_to)
    return eta * base


def _eta_values(eta, shape) -> np.ndarray:
    if isinstance(eta, EtaMap):
        if eta.eta.shape != shape[:2]:
            raise ValueError("eta map dimensions do not match the latent")
        return eta.eta[:, :, None]
    return np.asarray(float(eta))


def ddim_step(schedule: NoiseSchedule, z: TensorGrid, eps_hat: TensorGrid,
              t_from: int, t_to: int, eta, rng) -> TensorGrid:
    """One reverse step t_from -> t_to with interpolated determinism.

    Per pixel: x_to = sqrt(ab_to) * x0_hat + sqrt(1 - ab_to - sigma^2) * eps
    + sigma * xi, where x0_hat = (x - sqrt(1-ab_from) eps) / sqrt(ab_from)
    and sigma = eta * sqrt((1-ab_to)/(1-ab_from)) * sqrt(1 - ab_from/ab_to).
    A fresh normal field xi is always drawn, so scalar eta and a uniform map
    consume the stream identically.
    """
    if not (schedule.contains(t_from) and schedule.contains(t_to)):
        raise ValueError("timesteps must be schedule step indices")
    if t_from <= t_to:
        raise ValueError("ddim_step runs from a later to an earlier timestep")
    if z.data.shape != eps_hat.data.shape:
        raise ValueError("latent and noise estimate dimensions differ")
    ab_from = schedule.alpha_bar[t_from]
    ab_to = schedule.alpha_bar[t_to]

    sigma = ddim_sigma(schedule, t_from, t_to, _eta_values(eta, z.data.shape))
    var_eps = 1.0 - ab_to - sigma ** 2
    if np.any(var_eps < 0.0):
        warnings.warn("clamping negative direction variance to zero",
                      VarianceClampWarning, stacklevel=2)
        var_eps = np.maximum(var_eps, 0.0)

    x0_hat = (z.data - np.sqrt(1.0 - ab_from) * eps_hat.data) / np.sqrt(ab_from)
    xi = rng.standard_normal(z.data.shape)
    out = np.sqrt(ab_to) * x0_hat + np.sqrt(var_eps) * eps_hat.data + sigma * xi
    return TensorGrid(out)


def ddim_inversion_step(schedule: NoiseSchedule, z: TensorGrid, eps_hat: TensorGrid,
                        t_from: int, t_to: int) -> TensorGrid:
    """Deterministic inverse of :func:`ddim_step` at eta = 0, climbing
    t_from -> t_to (t_to later). With a frozen noise estimate the pair is an
    exact algebraic inverse."""
    if not (schedule.contains(t_from) and schedule.contains(t_to)):
        raise ValueError("timesteps must be schedule step indices")
    if t_to <= t_from:
        raise ValueError("inversion runs from an earlier to a later timestep")
    if z.data.shape != eps_hat.data.shape:
        raise ValueError("latent and noise estimate dimensions differ")
    ab_from = schedule.alpha_bar[t_from]
    ab_to = schedule.alpha_bar[t_to]
    x0_hat = (z.data - np.sqrt(1.0 - ab_from) * eps_hat.data) / np.sqrt(ab_from)
    out = np.sqrt(ab_to) * x0_hat + np.sqrt(1.0 - ab_to) * eps_hat.data
    return TensorGrid(out)


def cfg_combine(eps_cond: TensorGrid, eps_uncond: TensorGrid, gamma: float) -> TensorGrid:
    """Guided estimate: eps_uncond + gamma * (eps_cond - eps_uncond)."""
    if eps_cond.data.shape != eps_uncond.data.shape:
        raise ValueError("estimate dimensions differ")
    if gamma == 1.0:
        return eps_cond
    return TensorGrid(eps_uncond.data + gamma * (eps_cond.data - eps_uncond.data))


# --- cross-frame attention ---------------------------------------------------


@dataclass(frozen=True)
class AttentionInputs:
    """Queries from the generating frame plus keys/values from every attended
    latent (sequence-major layout: (tokens, dim))."""
    q: np.ndarray
    keys: tuple[np.ndarray, ...]
    values: tuple[np.ndarray, ...]

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        keys = tuple(np.asarray(k, dtype=np.float64) for k in self.keys)
        values = tuple(np.asarray(v, dtype=np.float64) for v in self.values)
        if q.ndim != 2 or q.shape[0] == 0 or q.shape[1] == 0:
            raise ValueError("q must be a non-empty (tokens, d_k) matrix")
        if not keys or len(keys) != len(values):
            raise ValueError("need a non-empty, paired list of keys and values")
        d_k = q.shape[1]
        d_v = values[0].shape[1]
        for k, v in zip(keys, values):
            if k.ndim != 2 or k.shape[1] != d_k:
                raise ValueError("key width must match the query width")
            if v.ndim != 2 or v.shape[1] != d_v or v.shape[0] != k.shape[0]:
                raise ValueError("values must pair with keys")
            if k.shape[0] == 0:
                raise ValueError("attended sequences must be non-empty")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "values", values)


def mcfa_attention(inputs: AttentionInputs) -> np.ndarray:
    """Attention where keys/values from all attended latents are concatenated
    along the token axis: softmax(Q K^T / sqrt(d_k)) V, numerically stable
    via row-max subtraction."""
    k = np.concatenate(inputs.keys, axis=0)
    v = np.concatenate(inputs.values, axis=0)
    logits = inputs.q @ k.T / np.sqrt(inputs.q.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ v


# --- analytic denoiser -------------------------------------------------------


class AnalyticGaussianDenoiser:
    """Exact minimum-MSE noise estimator for data distributed N(mu, s^2 I).

    E[x0 | x_t] = mu + (sqrt(ab) s^2 / (ab s^2 + 1 - ab)) (x_t - sqrt(ab) mu)
    and eps_hat = (x_t - sqrt(ab) E[x0 | x_t]) / sqrt(1 - ab). The attend
    list is ignored; conditioning, when given as an array, shifts the mean so
    guidance branches can be emulated.
    """

    def __init__(self, mu: TensorGrid, s: float, schedule: NoiseSchedule):
        if not s > 0:
            raise ValueError("s must be positive")
        self.mu = mu
        self.s = float(s)
        self.schedule = schedule

    def __call__(self, z: TensorGrid, t: int, conditioning=None,
                 attend: Sequence[TensorGrid] = ()) -> TensorGrid:
        ab = self.schedule.alpha_bar[t]
        mu = self.mu.data
        if conditioning is not None:
            mu = mu + np.asarray(conditioning, dtype=np.float64)
        gain = np.sqrt(ab) * self.s ** 2 / (ab * self.s ** 2 + 1.0 - ab)
        x0 = mu + gain * (z.data - np.sqrt(ab) * mu)
        eps = (z.data - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
        return TensorGrid(eps)


def analytic_gaussian_denoiser(mu: TensorGrid, s: float,
                               schedule: NoiseSchedule) -> AnalyticGaussianDenoiser:
    return AnalyticGaussianDenoiser(mu, s, schedule)


class IdentityCodec:
    """Latent space equals image space; encode and decode are the identity."""

    def encode(self, frame: TensorGrid) -> TensorGrid:
        return frame

    def decode(self, latent: TensorGrid) -> TensorGrid:
        return latent


# --- checkpointable generation loop ------------------------------------------

_CKPT_MAGIC = b"LFCK"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class LoopCheckpoint:
    """Everything the frame loop needs to resume: the index of the next frame
    to generate, the first frame, and the previously generated frame."""
    next_frame: int
    first_frame: TensorGrid
    prev_frame: TensorGrid

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(_CKPT_MAGIC)
            f.write(np.array([_CKPT_VERSION, self.next_frame], dtype="<u4").tobytes())
            np.lib.format.write_array(f, self.first_frame.data, version=(1, 0))
            np.lib.format.write_array(f, self.prev_frame.data, version=(1, 0))

    @classmethod
    def load(cls, path) -> "LoopCheckpoint":
        with open(path, "rb") as f:
            if f.read(4) != _CKPT_MAGIC:
                raise ValueError(f"{path}: not a loop checkpoint")
            version, next_frame = np.frombuffer(f.read(8), dtype="<u4")
            if version != _CKPT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {version}")
            first = np.lib.format.read_array(f)
            prev = np.lib.format.read_array(f)
        return cls(int(next_frame), TensorGrid(first), TensorGrid(prev))


def _renoise(schedule: NoiseSchedule, clean: np.ndarray, t: int, rng) -> np.ndarray:
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * clean + np.sqrt(1.0 - ab) * rng.standard_normal(clean.shape)


def iter_video(first_frame: TensorGrid, flows: Sequence[FlowField],
               eta_maps: Sequence[EtaMap], denoiser: Denoiser, codec,
               schedule: NoiseSchedule, params: SamplerParams,
               prompts: PromptPair | None = None,
               checkpoint: LoopCheckpoint | None = None):
    """Autoregressive frame generator (frame 0 is the input itself).

    Per frame: encode the previous frame, invert it to tau with the positive
    conditioning and self-attention only, warp the tau-latent with the
    frame's backward flow, then reverse-diffuse to the base timestep with
    cross-frame attention over the first and previous frames' latents
    (re-noised to the current timestep), guidance, and per-pixel eta. When
    inversion is disabled the warp applies to a freshly noised previous
    frame instead.

    State between frames is just (first frame, previous frame): memory does
    not grow with the frame count.
    """
    if len(flows) != len(eta_maps):
        raise ValueError(f"got {len(flows)} flows but {len(eta_maps)} eta maps")
    prompts = prompts or PromptPair()
    n_frames = len(flows) + 1

    first_latent = codec.encode(first_frame)
    for i, flow in enumerate(flows):
        if flow.convention != BACKWARD:
            raise ValueError(f"flow {i} must be backward (invert it first)")
        if flow.shape != (first_latent.height, first_latent.width):
            raise ValueError(f"flow {i} dimensions {flow.shape} do not match "
                             f"latent {(first_latent.height, first_latent.width)}")

    start = 1
    prev_frame = first_frame
    if checkpoint is not None:
        if not np.array_equal(checkpoint.first_frame.data, first_frame.data):
            raise ValueError("checkpoint was produced for a different first frame")
        start = checkpoint.next_frame
        prev_frame = checkpoint.prev_frame

    inv_pairs = schedule.inversion_pairs()
    gen_pairs = schedule.generation_pairs()
    seed = params.seed
    z0_clean = first_latent.data

    for f in range(start, n_frames):
        prev_latent = codec.encode(prev_frame)
        if params.use_inversion:
            z = prev_latent
            for t_from, t_to in inv_pairs:
                eps = denoiser(z, t_from, prompts.positive, (z,))
                z = ddim_inversion_step(schedule, z, eps, t_from, t_to)
        else:
            rng = stream_rng(seed, f, schedule.tau, _PURPOSE_FRESH)
            z = TensorGrid(_renoise(schedule, prev_latent.data, schedule.tau, rng))

        zeta = warp_backward(z, flows[f - 1], "clamp")

        if params.eta_policy.kind == "scalar":
            eta = params.eta_policy.value
        else:
            eta = eta_maps[f - 1]

        # the noise estimate for a t_from -> t_to transition is taken at the
        # lower timestep t_to, mirroring the inversion loop's ordering; the
        # attended latents are re-noised to that same level
        for t_from, t_to in gen_pairs:
            attend = _attend_list(params.attend_set, zeta, z0_clean,
                                  prev_latent.data, schedule, seed, f, t_to)
            eps_c = denoiser(zeta, t_to, prompts.positive, attend)
            if params.gamma == 1.0:
                eps = eps_c
            else:
                eps_u = denoiser(zeta, t_to, prompts.negative, attend)
                eps = cfg_combine(eps_c, eps_u, params.gamma)
            rng = stream_rng(seed, f, t_from, _PURPOSE_STEP)
            zeta = ddim_step(schedule, zeta, eps, t_from, t_to, eta, rng)

        prev_frame = codec.decode(zeta)
        yield prev_frame


def _attend_list(attend_set, zeta, z0_clean, prev_clean, schedule, seed, frame, t):
    if attend_set == "self":
        return (zeta,)
    out = []
    if attend_set in ("first", "first_and_previous"):
        rng = stream_rng(seed, frame, t, _PURPOSE_ATTEND_FIRST)
        out.append(TensorGrid(_renoise(schedule, z0_clean, t, rng)))
    if attend_set in ("previous", "first_and_previous"):
        rng = stream_rng(seed, frame, t, _PURPOSE_ATTEND_PREV)
        out.append(TensorGrid(_renoise(schedule, prev_clean, t, rng)))
    return tuple(out)


def generate_video(first_frame: TensorGrid, flows: Sequence[FlowField],
                   eta_maps: Sequence[EtaMap], denoiser: Denoiser, codec,
                   schedule: NoiseSchedule, params: SamplerParams,
                   prompts: PromptPair | None = None,
                   checkpoint: LoopCheckpoint | None = None) -> list[TensorGrid]:
    """Run the frame loop to completion and return all frames, starting with
    the (resumed or initial) prefix frame."""
    frames = [first_frame] if checkpoint is None else []
    frames.extend(iter_video(first_frame, flows, eta_maps, denoiser, codec,
                             schedule, params, prompts, checkpoint))
    return frames
