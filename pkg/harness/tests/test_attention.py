import numpy as np
import pytest
import torch

from sdharness.attention import (MCFAController, SelfAttentionBlock,
                                 scaled_dot_attention)
from sdharness.model import TinyLatentDiffusion


def make_block(seed=0, channels=8):
    torch.manual_seed(seed)
    block = SelfAttentionBlock(channels)
    with torch.no_grad():
        for p in block.parameters():
            p.copy_(torch.randn_like(p) * 0.2)
    return block


def tokens(seed, t=12, channels=8):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(1, t, channels, generator=gen, dtype=torch.float64)


def test_scaled_dot_attention_rows_normalized():
    q = tokens(0)
    out = scaled_dot_attention(q, q, torch.ones_like(q))
    assert torch.allclose(out, torch.ones_like(q), atol=1e-9)


def test_self_attend_patch_is_identity_of_unpatched():
    block = make_block()
    ctl = MCFAController([block])
    x = tokens(1)
    plain = block(x)
    with ctl.capture() as store:
        block(x)
    with ctl.attend([store]):
        patched = block(x)
    assert torch.equal(plain, patched)


def test_attending_other_latent_changes_output():
    block = make_block()
    ctl = MCFAController([block])
    x = tokens(2)
    other = tokens(3)
    plain = block(x)
    with ctl.capture() as store:
        block(other)
    with ctl.attend([store]):
        patched = block(x)
    assert not torch.allclose(plain, patched)


def test_duplicated_banks_match_single_bank():
    block = make_block()
    ctl = MCFAController([block])
    x = tokens(4)
    with ctl.capture() as store:
        block(x)
    with ctl.attend([store]):
        single = block(x)
    with ctl.attend([store, store]):
        doubled = block(x)
    assert torch.allclose(single, doubled, atol=1e-12)


def test_capture_records_every_block_once():
    model = TinyLatentDiffusion()
    ctl = model.attention()
    latent = np.random.default_rng(0).random((8, 8, model.latent_channels))
    with ctl.capture() as store:
        model.predict_eps(latent, 100, model.embed("x"))
    assert len(store) == 2
    assert all(len(entries) == 1 for entries in store)


def test_modes_restored_after_exception():
    block = make_block()
    ctl = MCFAController([block])
    with pytest.raises(RuntimeError):
        with ctl.capture():
            raise RuntimeError("boom")
    assert block._mcfa_mode == "off"
    x = tokens(5)
    assert torch.equal(block(x), block(x))


def test_unet_level_self_attend_equals_unpatched():
    model = TinyLatentDiffusion()
    latent = np.random.default_rng(1).random((8, 8, model.latent_channels))
    cond = model.embed("prompt")
    plain = model.predict_eps(latent, 250, cond)
    store = model.capture_pass(latent, 250, cond)
    patched = model.attended_eps(latent, 250, cond, [store])
    assert np.array_equal(plain, patched)


def test_attend_requires_nonempty_and_single_hits():
    block = make_block()
    ctl = MCFAController([block])
    with pytest.raises(ValueError):
        with ctl.attend([]):
            pass
    x = tokens(6)
    with ctl.capture() as store:
        block(x)
        block(x)  # two hits in one capture pass
    with pytest.raises(ValueError):
        with ctl.attend([store]):
            pass
