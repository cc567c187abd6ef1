import json
from pathlib import Path

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from latentflow.cli import main
from latentflow.grids import FlowField, TensorGrid
from latentflow.scene import (SceneError, load_frame_png, load_mask,
                              load_scene, run_scene, run_toy_pipeline,
                              save_frame_png, verify_manifest)

SCENES_DIR = Path(__file__).resolve().parents[1] / "scenes"


def write_scene(tmp_path, doc, name="scene.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=2))
    return path


def translate_scene(frames=3, canvas=24, dx=1.0, dy=0.0, factor=1, extra=None):
    doc = {
        "name": "t",
        "canvas": [canvas, canvas],
        "frames": frames,
        "seed": 1,
        "latent_factor": factor,
        "simulator": {"kind": "rigid", "variant": "translate", "dx": dx, "dy": dy},
        "eta": {"threshold": 1.0},
        "sampler": {"eta": "spatial", "denoiser_scale": 10.0,
                    "schedule": {"n_steps": 50, "tau": 400}},
    }
    if extra:
        doc.update(extra)
    return doc


def smooth_frame(n=24, seed=0, channels=3):
    rng = np.random.default_rng(seed)
    base = gaussian_filter(rng.random((n, n, channels)), (2, 2, 0), mode="wrap")
    base = (base - base.min()) / (base.max() - base.min())
    return TensorGrid(base)


# --- spec loading and validation --------------------------------------------


def test_shipped_scenes_all_load():
    scenes = sorted(SCENES_DIR.glob("*.json"))
    assert len(scenes) >= 7
    for path in scenes:
        spec = load_scene(path)
        assert spec.frames >= 1


def test_json_error_reports_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "name": "x",\n  oops\n}')
    with pytest.raises(SceneError, match="line 3"):
        load_scene(path)


def test_missing_keys_report_path(tmp_path):
    path = write_scene(tmp_path, {"name": "x", "canvas": [16, 16]})
    with pytest.raises(SceneError, match="frames"):
        load_scene(path)
    doc = translate_scene()
    del doc["simulator"]["dx"]
    with pytest.raises(SceneError, match=r"simulator\.dx"):
        load_scene(write_scene(tmp_path, doc))


def test_canvas_divisibility_checked(tmp_path):
    doc = translate_scene(canvas=30, factor=8)
    with pytest.raises(SceneError, match="latent_factor"):
        load_scene(write_scene(tmp_path, doc))


def test_missing_mask_file_rejected(tmp_path):
    doc = translate_scene()
    doc["eta"]["masks"] = ["nope.npy"]
    with pytest.raises(SceneError, match="nope.npy"):
        load_scene(write_scene(tmp_path, doc))


def test_mask_primitives(tmp_path):
    disk = load_mask({"disk": {"center": [8, 8], "radius": 4}}, (16, 16), tmp_path, "m")
    assert disk[8, 8] and not disk[0, 0]
    box = load_mask({"box": [2, 3, 4, 5]}, (16, 16), tmp_path, "m")
    assert box[3, 2] and box[7, 5] and not box[8, 6]
    both = load_mask({"union": [{"box": [0, 0, 2, 2]},
                                {"disk": {"center": [8, 8], "radius": 1}}]},
                     (16, 16), tmp_path, "m")
    assert both[0, 0] and both[8, 8]

    np.save(tmp_path / "m.npy", disk)
    again = load_mask("m.npy", (16, 16), tmp_path, "m")
    assert np.array_equal(again, disk)

    from PIL import Image
    Image.fromarray((disk * 255).astype(np.uint8), mode="L").save(tmp_path / "m.png")
    png = load_mask("m.png", (16, 16), tmp_path, "m")
    assert np.array_equal(png, disk)


# --- run_scene ----------------------------------------------------------------


def test_translate_scene_emits_constant_flows(tmp_path):
    spec = load_scene(write_scene(tmp_path, translate_scene(frames=3)))
    manifest_path = run_scene(spec, tmp_path / "out")
    files = sorted(p.name for p in (tmp_path / "out").iterdir())
    assert files == ["eta_0000.npy", "eta_0001.npy",
                     "flow_0000.flo", "flow_0001.flo", "manifest.json"]
    for i in range(2):
        flow = FlowField.load_flo(tmp_path / "out" / f"flow_{i:04d}.flo")
        assert flow.convention == "backward"
        assert np.allclose(flow.u, 1.0) and np.allclose(flow.v, 0.0)
    assert verify_manifest(manifest_path) == []


def test_rerun_is_byte_identical(tmp_path):
    doc = translate_scene(frames=4)
    spec = load_scene(write_scene(tmp_path, doc))
    run_scene(spec, tmp_path / "a")
    run_scene(spec, tmp_path / "b")
    for pa in sorted((tmp_path / "a").iterdir()):
        pb = tmp_path / "b" / pa.name
        assert pa.read_bytes() == pb.read_bytes(), pa.name


def test_emitted_flo_roundtrips_bit_exact(tmp_path):
    spec = load_scene(write_scene(tmp_path, translate_scene(frames=2, dx=0.37, dy=-1.2)))
    run_scene(spec, tmp_path / "out")
    path = tmp_path / "out" / "flow_0000.flo"
    flow = FlowField.load_flo(path)
    assert flow.flo_bytes() == path.read_bytes()


def test_translate_eta_marks_entering_columns(tmp_path):
    spec = load_scene(write_scene(tmp_path, translate_scene(frames=2, dx=2.0)))
    run_scene(spec, tmp_path / "out")
    eta = np.load(tmp_path / "out" / "eta_0000.npy")
    assert eta[:, :2].min() == 1.0  # backward source x-2 < 0
    assert eta[:, 3:].max() == 0.0


def test_two_smoke_balls_opposite_vertical_flow(tmp_path):
    doc = {
        "name": "two_balls",
        "canvas": [48, 48],
        "frames": 3,
        "seed": 1,
        "latent_factor": 1,
        "simulator": {
            "kind": "fluid",
            "sources": [
                {"mask": {"disk": {"center": [14, 24], "radius": 7}}, "buoyancy": [0.0, -0.5]},
                {"mask": {"disk": {"center": [34, 24], "radius": 7}}, "buoyancy": [0.0, 0.5]},
            ],
        },
    }
    spec = load_scene(write_scene(tmp_path, doc))
    run_scene(spec, tmp_path / "out")
    flow = FlowField.load_flo(tmp_path / "out" / "flow_0001.flo")
    ys, xs = np.mgrid[0:48, 0:48]
    left = (xs - 14) ** 2 + (ys - 24) ** 2 <= 49
    right = (xs - 34) ** 2 + (ys - 24) ** 2 <= 49
    assert flow.v[left].mean() < 0.0
    assert flow.v[right].mean() > 0.0


def test_boids_scene_runs_and_flows_bounded(tmp_path):
    doc = {
        "name": "flock",
        "canvas": [64, 64],
        "frames": 4,
        "seed": 4,
        "latent_factor": 1,
        "simulator": {"kind": "boids", "count": 8, "placement": "random",
                      "patch_radius": 4,
                      "params": {"max_speed": 3.0}},
    }
    spec = load_scene(write_scene(tmp_path, doc))
    run_scene(spec, tmp_path / "out")
    for i in range(3):
        flow = FlowField.load_flo(tmp_path / "out" / f"flow_{i:04d}.flo")
        assert flow.magnitude().max() <= 3.0 + 1e-6


# --- toy pipeline ---------------------------------------------------------------


def frame_file(tmp_path, grid, name="first.png"):
    path = tmp_path / name
    path.write_bytes(save_frame_png(grid))
    return path


def test_toy_single_frame_passthrough(tmp_path):
    spec = load_scene(write_scene(tmp_path, translate_scene(frames=1)))
    first = smooth_frame()
    path = frame_file(tmp_path, first)
    run_toy_pipeline(spec, path, tmp_path / "out")
    out = load_frame_png(tmp_path / "out" / "frame_0000.png")
    assert np.array_equal(out.data, load_frame_png(path).data)
    report = json.loads((tmp_path / "out" / "metrics.json").read_text())
    assert report["frames"] == 1 and report["motion_consistency"] is None


def test_toy_translate_consistency(tmp_path):
    spec = load_scene(write_scene(tmp_path, translate_scene(frames=3)))
    path = frame_file(tmp_path, smooth_frame())
    run_toy_pipeline(spec, path, tmp_path / "out")
    report = json.loads((tmp_path / "out" / "metrics.json").read_text())
    assert report["motion_consistency"] >= 0.9
    assert verify_manifest(tmp_path / "out" / "manifest.json") == []


def test_toy_rejects_wrong_frame_size(tmp_path):
    spec = load_scene(write_scene(tmp_path, translate_scene(frames=2, canvas=24)))
    path = frame_file(tmp_path, smooth_frame(n=16))
    with pytest.raises(SceneError, match="expected latent size"):
        run_toy_pipeline(spec, path, tmp_path / "out")


def test_toy_inversion_ablation_changes_output(tmp_path):
    base_doc = translate_scene(frames=3)
    spec = load_scene(write_scene(tmp_path, base_doc, "a.json"))
    path = frame_file(tmp_path, smooth_frame())
    run_toy_pipeline(spec, path, tmp_path / "a")

    ablated = translate_scene(frames=3)
    ablated["sampler"]["use_inversion"] = False
    spec2 = load_scene(write_scene(tmp_path, ablated, "b.json"))
    run_toy_pipeline(spec2, path, tmp_path / "b")

    a = load_frame_png(tmp_path / "a" / "frame_0002.png")
    b = load_frame_png(tmp_path / "b" / "frame_0002.png")
    assert not np.array_equal(a.data, b.data)


def test_clone_applied_to_first_frame(tmp_path):
    doc = translate_scene(frames=1)
    doc["clone"] = {"source_box": [0, 0, 4, 4], "targets": [[12, 12]]}
    spec = load_scene(write_scene(tmp_path, doc))
    base = np.zeros((24, 24, 3))
    base[:4, :4] = 1.0
    path = frame_file(tmp_path, TensorGrid(base))
    run_toy_pipeline(spec, path, tmp_path / "out")
    out = load_frame_png(tmp_path / "out" / "frame_0000.png")
    assert out.data[11, 11, 0] == 1.0  # pasted patch centered at (12, 12)


# --- manifests ------------------------------------------------------------------


def test_verify_detects_tampering(tmp_path):
    spec = load_scene(write_scene(tmp_path, translate_scene(frames=2)))
    manifest = run_scene(spec, tmp_path / "out")
    assert verify_manifest(manifest) == []
    target = tmp_path / "out" / "flow_0000.flo"
    data = bytearray(target.read_bytes())
    data[-1] ^= 0xFF
    target.write_bytes(bytes(data))
    problems = verify_manifest(manifest)
    assert problems == ["modified: flow_0000.flo"]
    target.unlink()
    assert verify_manifest(manifest) == ["missing: flow_0000.flo"]


# --- CLI ------------------------------------------------------------------------


def test_cli_simulate_and_verify(tmp_path, capsys):
    spec_path = write_scene(tmp_path, translate_scene(frames=3))
    assert main(["simulate", str(spec_path), "-o", str(tmp_path / "out")]) == 0
    assert main(["verify", str(tmp_path / "out" / "manifest.json")]) == 0
    out = capsys.readouterr().out
    assert "ok" in out


def test_cli_validation_error_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["simulate", str(bad), "-o", str(tmp_path / "out")]) == 2


def test_cli_runtime_error_exit_code(tmp_path):
    missing = tmp_path / "none" / "manifest.json"
    assert main(["verify", str(missing)]) == 3


def test_cli_verify_tampered_exit_code(tmp_path, capsys):
    spec_path = write_scene(tmp_path, translate_scene(frames=2))
    main(["simulate", str(spec_path), "-o", str(tmp_path / "out")])
    flow = tmp_path / "out" / "flow_0000.flo"
    flow.write_bytes(flow.read_bytes() + b"x")
    assert main(["verify", str(tmp_path / "out" / "manifest.json")]) == 3


def test_cli_flo_info_and_diff(tmp_path, capsys):
    a = FlowField.constant(6, 4, 1.0, -0.5)
    b = FlowField.constant(6, 4, 1.0, 0.5)
    a.save_flo(tmp_path / "a.flo")
    b.save_flo(tmp_path / "b.flo")
    assert main(["flo", "info", str(tmp_path / "a.flo")]) == 0
    out = capsys.readouterr().out
    assert "6x4" in out
    assert main(["flo", "diff", str(tmp_path / "a.flo"), str(tmp_path / "a.flo")]) == 0
    assert "identical" in capsys.readouterr().out
    assert main(["flo", "diff", str(tmp_path / "a.flo"), str(tmp_path / "b.flo")]) == 0
    assert "differ" in capsys.readouterr().out


def test_cli_metrics_subcommand(tmp_path, capsys):
    frames_dir = tmp_path / "frames"
    frames_dir.mkdir()
    base = smooth_frame(n=48)
    for i in range(3):
        rolled = TensorGrid(np.roll(base.data, i, axis=1))
        (frames_dir / f"frame_{i:04d}.png").write_bytes(save_frame_png(rolled))
    report_path = tmp_path / "report.json"
    assert main(["metrics", str(frames_dir), "--report", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert len(report["per_pair"]) == 2
    assert 0.0 <= report["mean"] <= 1.0


def test_cli_toy_run(tmp_path):
    spec_path = write_scene(tmp_path, translate_scene(frames=2))
    frame = frame_file(tmp_path, smooth_frame())
    assert main(["toy-run", str(spec_path), str(frame), "-o", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "frame_0001.png").exists()
