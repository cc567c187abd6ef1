"""Cross-frame attention patching for the self-attention blocks of a UNet.

The patch generalizes self-attention: keys and values are computed from the
hidden states of an arbitrary list of attended latents, concatenated along
the token axis, while queries stay with the generating latent. With the
attend list equal to the block's own input the patched path reproduces the
unpatched output bit for bit.

Usage: a :class:`MCFAController` owns every self-attention block of a model.
``capture()`` records each block's normalized hidden input during a forward
pass of an attended latent; ``attend([...])`` redirects key/value sources to
the concatenation of previously captured banks.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import torch
from torch import nn

MODE_OFF = "off"
MODE_CAPTURE = "capture"
MODE_ATTEND = "attend"


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over (batch, tokens, dim) tensors."""
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    logits = logits - logits.amax(dim=-1, keepdim=True)
    weights = torch.softmax(logits, dim=-1)
    return weights @ v


class SelfAttentionBlock(nn.Module):
    """Pre-norm single-head self-attention with residual, patchable by an
    :class:`MCFAController` (token layout (B, T, C))."""

    def __init__(self, channels: int, dtype=torch.float64):
        super().__init__()
        self.norm = nn.LayerNorm(channels, dtype=dtype)
        self.to_q = nn.Linear(channels, channels, bias=False, dtype=dtype)
        self.to_k = nn.Linear(channels, channels, bias=False, dtype=dtype)
        self.to_v = nn.Linear(channels, channels, bias=False, dtype=dtype)
        self.to_out = nn.Linear(channels, channels, dtype=dtype)
        self._mcfa_mode = MODE_OFF
        self._mcfa_store: list[torch.Tensor] | None = None
        self._mcfa_bank: list[torch.Tensor] | None = None

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        normed = self.norm(hidden)
        if self._mcfa_mode == MODE_CAPTURE:
            self._mcfa_store.append(normed.detach())
            source = normed
        elif self._mcfa_mode == MODE_ATTEND:
            source = torch.cat(self._mcfa_bank, dim=1)
        else:
            source = normed
        out = scaled_dot_attention(self.to_q(normed), self.to_k(source), self.to_v(source))
        return hidden + self.to_out(out)


class MCFAController:
    """Coordinates capture/attend modes across all self-attention blocks."""

    def __init__(self, blocks):
        self.blocks = list(blocks)
        if not self.blocks:
            raise ValueError("model exposes no self-attention blocks")

    def _set(self, mode, stores=None, banks=None):
        for i, block in enumerate(self.blocks):
            block._mcfa_mode = mode
            block._mcfa_store = None if stores is None else stores[i]
            block._mcfa_bank = None if banks is None else banks[i]

    @contextmanager
    def capture(self):
        """Record each block's hidden input during the enclosed forward pass;
        yields the per-block bank (list of lists of tensors)."""
        stores = [[] for _ in self.blocks]
        self._set(MODE_CAPTURE, stores=stores)
        try:
            yield stores
        finally:
            self._set(MODE_OFF)

    @contextmanager
    def attend(self, captured: list[list[list[torch.Tensor]]]):
        """Route keys/values to the concatenation of the given capture banks
        (one bank per attended latent, in list order)."""
        if not captured:
            raise ValueError("attend list must be non-empty")
        banks = []
        for i in range(len(self.blocks)):
            entries = []
            for bank in captured:
                if len(bank[i]) != 1:
                    raise ValueError("each capture pass must hit every block exactly once")
                entries.append(bank[i][0])
            banks.append(entries)
        self._set(MODE_ATTEND, banks=banks)
        try:
            yield
        finally:
            self._set(MODE_OFF)


class MCFAAttnProcessor:
    """Drop-in attention processor for diffusers-style ``Attention`` modules
    (``to_q``/``to_k``/``to_v``/``to_out``, multi-head). Install on every
    self-attention block; cross-attention calls (encoder_hidden_states given)
    pass through untouched.

    The shared ``state`` dict carries the mode: ``{"mode": "capture",
    "store": {...}}`` or ``{"mode": "attend", "banks": {...}}`` keyed by the
    processor's ``name``.
    """

    def __init__(self, name: str, state: dict):
        self.name = name
        self.state = state

    def __call__(self, attn, hidden_states, encoder_hidden_states=None,
                 attention_mask=None, **kwargs):
        is_cross = encoder_hidden_states is not None
        source = encoder_hidden_states if is_cross else hidden_states
        mode = self.state.get("mode", MODE_OFF)
        if not is_cross and mode == MODE_CAPTURE:
            self.state["store"].setdefault(self.name, []).append(hidden_states.detach())
        elif not is_cross and mode == MODE_ATTEND:
            source = torch.cat(self.state["banks"][self.name], dim=1)

        q = attn.to_q(hidden_states)
        k = attn.to_k(source)
        v = attn.to_v(source)
        q = attn.head_to_batch_dim(q)
        k = attn.head_to_batch_dim(k)
        v = attn.head_to_batch_dim(v)
        out = scaled_dot_attention(q, k, v)
        out = attn.batch_to_head_dim(out)
        out = attn.to_out[0](out)
        out = attn.to_out[1](out)
        return out
