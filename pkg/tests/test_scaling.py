"""Soft resource-scaling properties: constant loop state, linear scene cost.

Bounds are deliberately generous; these guard against O(N) state creep, not
micro-regressions.
"""

import json
import time
import tracemalloc

import numpy as np

from latentflow.grids import EtaMap, FlowField, TensorGrid
from latentflow.sampler import (AnalyticGaussianDenoiser, EtaPolicy,
                                IdentityCodec, SamplerParams, generate_video)
from latentflow.scene import load_scene, run_scene
from latentflow.schedule import make_schedule


def _run(n_frames, size=16):
    sch = make_schedule(n_steps=25, tau=400)
    rng = np.random.default_rng(0)
    first = TensorGrid(rng.random((size, size, 1)))
    den = AnalyticGaussianDenoiser(first, 10.0, sch)
    flows = [FlowField.zeros(size, size) for _ in range(n_frames - 1)]
    maps = [EtaMap.zeros(size, size) for _ in range(n_frames - 1)]
    params = SamplerParams(eta_policy=EtaPolicy.scalar(0.0))
    out = generate_video(first, flows, maps, den, IdentityCodec(), sch, params)
    return len(out)


def test_generation_loop_memory_constant_in_frame_count():
    _run(2)  # warm caches
    tracemalloc.start()
    _run(3)
    _, peak_small = tracemalloc.get_traced_memory()
    tracemalloc.stop()

    tracemalloc.start()
    _run(12)
    _, peak_large = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    # the loop keeps only the first and previous frames; peaks must not scale
    # with the frame count (the returned list is excluded by using tiny frames)
    assert peak_large < peak_small * 2 + 256_000, (peak_small, peak_large)


def test_scene_wall_clock_scales_linearly(tmp_path):
    def scene(frames):
        doc = {
            "name": "lin", "canvas": [32, 32], "frames": frames, "seed": 1,
            "latent_factor": 1,
            "simulator": {"kind": "rigid", "variant": "translate", "dx": 1.0, "dy": 0.0},
        }
        path = tmp_path / f"s{frames}.json"
        path.write_text(json.dumps(doc))
        return load_scene(path)

    run_scene(scene(2), tmp_path / "warm")  # warm-up
    t0 = time.perf_counter()
    run_scene(scene(4), tmp_path / "a")
    t_small = time.perf_counter() - t0
    t0 = time.perf_counter()
    run_scene(scene(13), tmp_path / "b")
    t_large = time.perf_counter() - t0
    # 12 transitions vs 3: proportional cost is 4x; allow wide slack
    assert t_large < 10 * t_small + 0.5, (t_small, t_large)
