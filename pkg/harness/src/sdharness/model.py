"""Latent diffusion model adapters.

The pipeline talks to a small adapter surface: encode/decode between images
and latents, prompt embedding, noise prediction, the training-time signal
schedule, and access to an :class:`~sdharness.attention.MCFAController` for
the model's self-attention blocks.

Two implementations ship here:

- :class:`TinyLatentDiffusion` - a deterministic, locally constructed model
  (lossless space-to-depth codec plus a small attention UNet) used by the
  test suite; it exercises every pipeline mechanism without any downloads.
- :func:`load_diffusers_model` - wraps a locally available pretrained
  checkpoint through the ``diffusers`` library when that is installed;
  self-attention blocks are patched via attention processors.
"""

from __future__ import annotations

import hashlib
import math
from typing import Protocol

import numpy as np
import torch
from torch import nn

from latentflow.schedule import NoiseSchedule, make_schedule

from .attention import MCFAAttnProcessor, MCFAController, SelfAttentionBlock


class LatentDiffusionAdapter(Protocol):
    latent_factor: int
    latent_channels: int

    def schedule(self, n_steps: int, tau: int) -> NoiseSchedule: ...

    def encode(self, image: np.ndarray) -> np.ndarray: ...

    def decode(self, latent: np.ndarray) -> np.ndarray: ...

    def embed(self, prompt: str | None): ...

    def predict_eps(self, latent: np.ndarray, t: int, cond) -> np.ndarray: ...

    def attention(self) -> MCFAController: ...


def _timestep_embedding(t: int, dim: int, dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    angles = t * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)])


class _TinyUNet(nn.Module):
    """conv-in, two attention blocks bridged by a conv, conv-out; timestep and
    prompt embeddings enter additively per channel."""

    def __init__(self, channels: int, width: int = 32, dtype=torch.float64):
        super().__init__()
        self.width = width
        self.conv_in = nn.Conv2d(channels, width, 3, padding=1, dtype=dtype)
        self.attn1 = SelfAttentionBlock(width, dtype=dtype)
        self.mid = nn.Conv2d(width, width, 3, padding=1, dtype=dtype)
        self.attn2 = SelfAttentionBlock(width, dtype=dtype)
        self.conv_out = nn.Conv2d(width, channels, 3, padding=1, dtype=dtype)
        self.t_proj = nn.Linear(width, width, dtype=dtype)
        self.p_proj = nn.Linear(width, width, dtype=dtype)

    def forward(self, x: torch.Tensor, t: int, cond: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        emb = self.t_proj(_timestep_embedding(t, self.width, x.dtype))
        emb = emb + self.p_proj(cond)
        hid = self.conv_in(x) + emb[None, :, None, None]

        tokens = hid.permute(0, 2, 3, 1).reshape(b, h * w, self.width)
        tokens = self.attn1(tokens)
        hid = tokens.reshape(b, h, w, self.width).permute(0, 3, 1, 2)
        hid = torch.tanh(self.mid(hid))
        tokens = hid.permute(0, 2, 3, 1).reshape(b, h * w, self.width)
        tokens = self.attn2(tokens)
        hid = tokens.reshape(b, h, w, self.width).permute(0, 3, 1, 2)
        return self.conv_out(hid)


class TinyLatentDiffusion:
    """Deterministic stand-in latent diffusion model for desk-scale runs.

    The codec is lossless space-to-depth: an (H, W, C) image becomes an
    (H/f, W/f, C f^2) latent, so motion applied in latent space is exactly
    legible in pixel space. The UNet is a small randomly initialized network
    (fixed seed) with real self-attention blocks; ``eps_scale`` keeps its
    predictions gentle so inversion round trips stay informative.
    """

    def __init__(self, latent_factor: int = 4, image_channels: int = 1,
                 seed: int = 0, eps_scale: float = 0.05):
        self.latent_factor = latent_factor
        self.image_channels = image_channels
        self.latent_channels = image_channels * latent_factor ** 2
        self.eps_scale = float(eps_scale)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            torch.manual_seed(seed)
            self.unet = _TinyUNet(self.latent_channels).eval()
            for p in self.unet.parameters():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.05)
        self._beta = (8.5e-4, 1.2e-2)
        self.t_train = 1000

    def schedule(self, n_steps: int, tau: int) -> NoiseSchedule:
        return make_schedule(t_train=self.t_train, beta_start=self._beta[0],
                             beta_end=self._beta[1], spacing="sqrt_space",
                             n_steps=n_steps, tau=tau)

    def encode(self, image: np.ndarray) -> np.ndarray:
        h, w, c = image.shape
        f = self.latent_factor
        if h % f or w % f or c != self.image_channels:
            raise ValueError(f"image shape {image.shape} not encodable (factor {f}, "
                             f"{self.image_channels} channels)")
        x = image.reshape(h // f, f, w // f, f, c)
        return x.transpose(0, 2, 1, 3, 4).reshape(h // f, w // f, f * f * c)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        lh, lw, lc = latent.shape
        f = self.latent_factor
        c = self.image_channels
        x = latent.reshape(lh, lw, f, f, c).transpose(0, 2, 1, 3, 4)
        return np.ascontiguousarray(x).reshape(lh * f, lw * f, c)

    def embed(self, prompt: str | None) -> torch.Tensor:
        digest = hashlib.sha256((prompt or "").encode()).digest()
        gen = torch.Generator().manual_seed(int.from_bytes(digest[:8], "little"))
        return torch.randn(self.unet.width, generator=gen, dtype=torch.float64)

    def _to_torch(self, latent: np.ndarray) -> torch.Tensor:
        # copy: inputs may be read-only views from the value types
        return torch.from_numpy(np.array(latent, copy=True)).permute(2, 0, 1)[None]

    def predict_eps(self, latent: np.ndarray, t: int, cond) -> np.ndarray:
        with torch.no_grad():
            out = self.unet(self._to_torch(latent), t, cond) * self.eps_scale
        return out[0].permute(1, 2, 0).numpy()

    def attention(self) -> MCFAController:
        if not hasattr(self, "_controller"):
            self._controller = MCFAController([self.unet.attn1, self.unet.attn2])
        return self._controller

    def capture_pass(self, latent: np.ndarray, t: int, cond):
        """Run the UNet on an attended latent, recording per-block hidden
        states for a later attended evaluation."""
        with self.attention().capture() as store:
            self.predict_eps(latent, t, cond)
        return store

    def attended_eps(self, latent: np.ndarray, t: int, cond, stores) -> np.ndarray:
        with self.attention().attend(stores):
            return self.predict_eps(latent, t, cond)


class DiffusersAdapter:
    """Adapter over a diffusers Stable-Diffusion checkpoint (v1.x layout).

    Requires the ``diffusers`` and ``transformers`` packages plus a local or
    cached checkpoint; everything runs through the public pipeline
    components (VAE, UNet, text encoder) with MCFA attention processors
    installed on every self-attention block.
    """

    def __init__(self, pipe, device: str = "cpu"):
        self.pipe = pipe
        self.device = device
        self.latent_factor = 2 ** (len(pipe.vae.config.block_out_channels) - 1)
        self.latent_channels = pipe.unet.config.in_channels
        self.t_train = int(pipe.scheduler.config.num_train_timesteps)
        self._alpha_bar = pipe.scheduler.alphas_cumprod.cpu().numpy().astype(np.float64)
        self._state = {"mode": "off"}
        self._install_processors()

    def _install_processors(self):
        procs = {}
        self._self_attn_names = []
        for name in self.pipe.unet.attn_processors:
            if name.endswith("attn1.processor"):  # self-attention blocks
                procs[name] = MCFAAttnProcessor(name, self._state)
                self._self_attn_names.append(name)
            else:
                procs[name] = self.pipe.unet.attn_processors[name]
        self.pipe.unet.set_attn_processor(procs)

    def schedule(self, n_steps: int, tau: int) -> NoiseSchedule:
        steps = np.unique(np.round(np.linspace(0, self.t_train - 1, n_steps)).astype(np.int64))
        snapped = steps[steps <= tau][-1]
        return NoiseSchedule(self.t_train, self._alpha_bar, steps, int(snapped))

    def encode(self, image: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(image * 2.0 - 1.0).float().permute(2, 0, 1)[None].to(self.device)
        with torch.no_grad():
            posterior = self.pipe.vae.encode(x).latent_dist
            z = posterior.mean * self.pipe.vae.config.scaling_factor
        return z[0].permute(1, 2, 0).cpu().double().numpy()

    def decode(self, latent: np.ndarray) -> np.ndarray:
        z = torch.from_numpy(latent).float().permute(2, 0, 1)[None].to(self.device)
        with torch.no_grad():
            img = self.pipe.vae.decode(z / self.pipe.vae.config.scaling_factor).sample
        img = (img[0].permute(1, 2, 0).cpu().double().numpy() + 1.0) / 2.0
        return np.clip(img, 0.0, 1.0)

    def embed(self, prompt: str | None):
        tok = self.pipe.tokenizer([prompt or ""], padding="max_length",
                                  max_length=self.pipe.tokenizer.model_max_length,
                                  truncation=True, return_tensors="pt")
        with torch.no_grad():
            return self.pipe.text_encoder(tok.input_ids.to(self.device))[0]

    def predict_eps(self, latent: np.ndarray, t: int, cond) -> np.ndarray:
        z = torch.from_numpy(latent).float().permute(2, 0, 1)[None].to(self.device)
        with torch.no_grad():
            eps = self.pipe.unet(z, t, encoder_hidden_states=cond).sample
        return eps[0].permute(1, 2, 0).cpu().double().numpy()

    # capture/attend mirror MCFAController's contract through the shared state
    def capture_pass(self, latent: np.ndarray, t: int, cond) -> dict:
        self._state.clear()
        self._state.update({"mode": "capture", "store": {}})
        try:
            self.predict_eps(latent, t, cond)
            return self._state["store"]
        finally:
            self._state.clear()
            self._state.update({"mode": "off"})

    def attended_eps(self, latent: np.ndarray, t: int, cond, stores: list[dict]) -> np.ndarray:
        banks = {name: [s[name][0] for s in stores] for name in self._self_attn_names}
        self._state.clear()
        self._state.update({"mode": "attend", "banks": banks})
        try:
            return self.predict_eps(latent, t, cond)
        finally:
            self._state.clear()
            self._state.update({"mode": "off"})


def load_diffusers_model(model_id: str, device: str = "cpu") -> DiffusersAdapter:
    try:
        from diffusers import StableDiffusionPipeline
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise RuntimeError(
            "the real-model path needs the 'diffusers' package and a local "
            "checkpoint; install diffusers and retry") from exc
    pipe = StableDiffusionPipeline.from_pretrained(model_id, safety_checker=None)
    pipe = pipe.to(device)
    return DiffusersAdapter(pipe, device)


def build_adapter(model: str, device: str = "cpu"):
    if model == "tiny":
        return TinyLatentDiffusion()
    return load_diffusers_model(model, device)
