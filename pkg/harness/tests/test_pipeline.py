import json

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from latentflow.grids import TensorGrid
from latentflow.scene import load_scene, run_scene, save_frame_png
from sdharness.model import TinyLatentDiffusion
from sdharness.pipeline import (HarnessConfig, latent_flow_correlation,
                                load_artifacts, run_pipeline)


def smooth(seed, n=32):
    rng = np.random.default_rng(seed)
    t = gaussian_filter(rng.random((n, n)), 2.5, mode="wrap")
    return (t - t.min()) / (t.max() - t.min())


@pytest.fixture()
def artifacts(tmp_path):
    """A primary-emitted translate scene at the tiny model's latent factor."""
    doc = {
        "name": "harness_scene",
        "canvas": [32, 32],
        "frames": 4,
        "seed": 3,
        "latent_factor": 4,
        "simulator": {"kind": "rigid", "variant": "translate", "dx": 4.0, "dy": 0.0},
        "eta": {"threshold": 1.0},
    }
    spec_path = tmp_path / "scene.json"
    spec_path.write_text(json.dumps(doc))
    out = tmp_path / "artifacts"
    run_scene(load_scene(spec_path), out)

    frame_path = tmp_path / "first.png"
    frame_path.write_bytes(save_frame_png(TensorGrid(smooth(0))))
    return out / "manifest.json", frame_path


def make_config(artifacts, tmp_path, **kw):
    manifest, frame = artifacts
    defaults = dict(manifest=manifest, first_frame=frame,
                    output_dir=tmp_path / "video", prompt="p", negative_prompt="n",
                    gamma=3.0, tau=400, steps=25, seed=9, model="tiny")
    defaults.update(kw)
    return HarnessConfig(**defaults)


def test_load_artifacts_roundtrip(artifacts, tmp_path):
    manifest, _ = artifacts
    flows, etas = load_artifacts(manifest)
    assert len(flows) == 3 and len(etas) == 3
    assert flows[0].shape == (8, 8)
    assert etas[0].eta.shape == (8, 8)


def test_load_artifacts_rejects_tampering(artifacts):
    manifest, _ = artifacts
    victim = manifest.parent / "flow_0001.flo"
    victim.write_bytes(victim.read_bytes() + b"?")
    with pytest.raises(RuntimeError, match="verification"):
        load_artifacts(manifest)


def test_run_pipeline_emits_frames_and_report(artifacts, tmp_path):
    config = make_config(artifacts, tmp_path)
    report = run_pipeline(config, TinyLatentDiffusion())
    out = config.output_dir
    assert sorted(p.name for p in out.glob("frame_*.png")) == [
        f"frame_{i:04d}.png" for i in range(4)]
    on_disk = json.loads((out / "report.json").read_text())
    assert on_disk == report
    assert len(report["per_pair"]) == 3
    assert 0.0 <= report["mean"] <= 1.0
    assert report["frames"] == 4
    assert report["frame_consistency"] is None  # no embedding model configured


def test_run_pipeline_deterministic(artifacts, tmp_path):
    a = make_config(artifacts, tmp_path, output_dir=tmp_path / "a")
    b = make_config(artifacts, tmp_path, output_dir=tmp_path / "b")
    run_pipeline(a, TinyLatentDiffusion())
    run_pipeline(b, TinyLatentDiffusion())
    for pa in sorted((tmp_path / "a").iterdir()):
        assert pa.read_bytes() == (tmp_path / "b" / pa.name).read_bytes(), pa.name


def test_attend_ablations_produce_different_videos(artifacts, tmp_path):
    outputs = {}
    for attend in ("self", "first_and_previous"):
        config = make_config(artifacts, tmp_path, attend_set=attend,
                             output_dir=tmp_path / attend)
        run_pipeline(config, TinyLatentDiffusion())
        outputs[attend] = (tmp_path / attend / "frame_0003.png").read_bytes()
    assert outputs["self"] != outputs["first_and_previous"]


def test_scalar_eta_path(artifacts, tmp_path):
    config = make_config(artifacts, tmp_path, eta=0.0, output_dir=tmp_path / "e0")
    report = run_pipeline(config, TinyLatentDiffusion())
    assert report["frames"] == 4


def test_resolution_mismatch_rejected(artifacts, tmp_path):
    manifest, _ = artifacts
    big = TensorGrid(smooth(1, n=64))
    frame = tmp_path / "big.png"
    frame.write_bytes(save_frame_png(big))
    config = make_config((manifest, frame), tmp_path)
    with pytest.raises(RuntimeError, match="latents"):
        run_pipeline(config, TinyLatentDiffusion())


def test_config_from_json_keeps_extras(tmp_path):
    doc = {"manifest": "m.json", "first_frame": "f.png", "output_dir": "o",
           "gamma": 5.0, "custom_field": 1}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    config = HarnessConfig.from_json(path)
    assert config.gamma == 5.0
    assert config.extra == {"custom_field": 1}


def test_latent_flow_correlation_translation_clip():
    base = smooth(2, n=64)
    frames = [TensorGrid(np.roll(base, 4 * i, axis=1)) for i in range(3)]
    model = TinyLatentDiffusion()
    report = latent_flow_correlation(frames, tau=400, adapter=model, steps=25)
    assert all(report.defined)
    assert report.mean > 0.5


def test_latent_flow_correlation_duplicated_pair_flagged():
    frame = TensorGrid(smooth(3, n=64))
    model = TinyLatentDiffusion()
    report = latent_flow_correlation([frame, frame], tau=400, adapter=model, steps=25)
    assert report.defined == [False]
    assert report.per_pair == [0.0]


def test_attention_patch_box_locates_hot_region():
    from sdharness.pipeline import attention_patch_box
    attn = np.zeros((16, 16))
    attn[5:8, 9:12] = 1.0
    attn[6, 10] = 2.0
    box = attention_patch_box(attn, threshold=0.4, pad=1)
    assert box == (8, 4, 5, 5)
    with pytest.raises(ValueError):
        attention_patch_box(np.zeros((4, 4)))


def test_clone_seeding_places_patches(artifacts, tmp_path):
    manifest, _ = artifacts
    base = np.full((32, 32), 0.2)
    base[0:8, 0:8] = 0.9  # one bright "agent" patch in the corner
    frame = tmp_path / "one_agent.png"
    frame.write_bytes(save_frame_png(TensorGrid(base[..., None])))
    config = make_config((manifest, frame), tmp_path, eta=0.0,
                         output_dir=tmp_path / "cloned")
    config.extra["clone"] = {"source_box": [0, 0, 2, 2], "targets": [[6, 6]]}
    run_pipeline(config, TinyLatentDiffusion())
    from latentflow.scene import load_frame_png
    out0 = load_frame_png(tmp_path / "cloned" / "frame_0000.png")
    # the cloned latent patch decodes to a bright block around (24, 24)
    cloned_region = out0.data[21:27, 21:27].mean()
    background = out0.data[12:18, 21:27].mean()
    assert cloned_region > background + 0.3
