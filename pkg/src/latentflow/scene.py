"""Scene-driven orchestration: declarative scene specs, simulator runs that
emit flow/eta sequences, the toy end-to-end pipeline, and checksummed
manifests.

A scene is one JSON document. Masks may be files (.png thresholded at 128,
or boolean/.npy) or inline primitives:

    {"disk": {"center": [x, y], "radius": r}}
    {"box": [x, y, width, height]}
    {"union": [<mask>, <mask>, ...]}

Outputs are written atomically (temp file + rename) and recorded in
``manifest.json`` with SHA-256 checksums; rerunning a scene with the same
spec and seed reproduces every byte.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ._version import __version__
from .boids import BoidsParams, BoidsState, Bounds, boids_step, rasterize_agent_flow
from .fluid import (DEFAULT_PRESSURE_CAP, DEFAULT_PRESSURE_TOL,
                    add_smoke_species, fluid_init_from_mask, fluid_step)
from .grids import EtaMap, TensorGrid
from .metrics import motion_consistency
from .rigid import RadialGrowth, SphereRotation, Translate, rigid_flow
from .sampler import (AnalyticGaussianDenoiser, EtaPolicy, IdentityCodec,
                      SamplerParams, generate_video)
from .schedule import make_schedule
from .warp import clone_patch, derive_eta_map, invert_flow, resample_flow

SCHEMA_VERSION = 1


class SceneError(ValueError):
    """A scene spec failed validation; the message carries the JSON path."""


def _fail(path: str, msg: str):
    raise SceneError(f"{path}: {msg}")


def _need(obj: dict, key: str, path: str):
    if key not in obj:
        _fail(f"{path}.{key}" if ":" in path else f"{path}:{key}",
              "missing required key")
    return obj[key]


def _number(value, path: str) -> float:
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        _fail(path, f"expected a number, got {value!r}")
    return float(value)


def _int(value, path: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        _fail(path, f"expected an integer, got {value!r}")
    return value


def _pair(value, path: str) -> tuple[float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        _fail(path, f"expected a pair of numbers, got {value!r}")
    return (_number(value[0], path + "[0]"), _number(value[1], path + "[1]"))


@dataclass(frozen=True)
class SceneSpec:
    name: str
    canvas: tuple[int, int]          # (width, height)
    frames: int
    seed: int
    latent_factor: int
    simulator: dict
    eta: dict
    sampler: dict
    clone: dict | None
    metadata: dict
    base_dir: Path
    raw: bytes                       # spec file bytes, for hashing

    @property
    def latent_size(self) -> tuple[int, int]:
        return (self.canvas[0] // self.latent_factor,
                self.canvas[1] // self.latent_factor)

    def spec_sha256(self) -> str:
        return hashlib.sha256(self.raw).hexdigest()


def load_scene(path) -> SceneSpec:
    path = Path(path)
    raw = path.read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise SceneError(f"{path}: top level must be an object")
    return _validate_scene(doc, path.parent, raw, str(path))


def _validate_scene(doc: dict, base_dir: Path, raw: bytes, where: str) -> SceneSpec:
    name = _need(doc, "name", where)
    if not isinstance(name, str) or not name:
        _fail(where + ":name", "expected a non-empty string")
    canvas = _need(doc, "canvas", where)
    if (not isinstance(canvas, list) or len(canvas) != 2
            or not all(isinstance(v, int) and v > 0 for v in canvas)):
        _fail(where + ":canvas", "expected [width, height] positive integers")
    frames = _int(_need(doc, "frames", where), where + ":frames")
    if frames < 1:
        _fail(where + ":frames", "need at least one frame")
    seed = _int(doc.get("seed", 0), where + ":seed")
    factor = _int(doc.get("latent_factor", 8), where + ":latent_factor")
    if factor < 1:
        _fail(where + ":latent_factor", "must be >= 1")
    if canvas[0] % factor or canvas[1] % factor:
        _fail(where + ":latent_factor", f"canvas {canvas} not divisible by {factor}")

    sim = _need(doc, "simulator", where)
    if not isinstance(sim, dict):
        _fail(where + ":simulator", "expected an object")
    kind = _need(sim, "kind", where + ":simulator")
    if kind not in ("rigid", "fluid", "boids"):
        _fail(where + ":simulator.kind", f"unknown simulator '{kind}'")

    eta = doc.get("eta", {})
    if not isinstance(eta, dict):
        _fail(where + ":eta", "expected an object")
    threshold = _number(eta.get("threshold", 1.0), where + ":eta.threshold")
    if threshold <= 0:
        _fail(where + ":eta.threshold", "must be positive")
    for i, m in enumerate(eta.get("masks", [])):
        if isinstance(m, str) and not (base_dir / m).exists():
            _fail(where + f":eta.masks[{i}]", f"file not found: {m}")

    sampler = doc.get("sampler", {})
    if not isinstance(sampler, dict):
        _fail(where + ":sampler", "expected an object")

    clone = doc.get("clone")
    if clone is not None and not isinstance(clone, dict):
        _fail(where + ":clone", "expected an object")

    spec = SceneSpec(
        name=name, canvas=(canvas[0], canvas[1]), frames=frames, seed=seed,
        latent_factor=factor, simulator=sim, eta=eta, sampler=sampler,
        clone=clone, metadata=doc.get("metadata", {}), base_dir=base_dir, raw=raw,
    )
    # fail fast on a malformed simulator block (files, ranges) at load time
    _build_stepper(spec)
    return spec


# --- masks -------------------------------------------------------------------


def load_mask(spec_entry, dims, base_dir: Path, path: str) -> np.ndarray:
    """Resolve a mask spec (file path or inline primitive) to (H, W) bool."""
    w, h = dims
    if isinstance(spec_entry, str):
        file = base_dir / spec_entry
        if not file.exists():
            _fail(path, f"file not found: {spec_entry}")
        if file.suffix == ".npy":
            arr = np.load(file)
        else:
            arr = np.asarray(Image.open(file).convert("L"), dtype=np.float64)
            arr = arr >= 128
        mask = np.asarray(arr).astype(bool)
        if mask.shape != (h, w):
            _fail(path, f"mask shape {mask.shape} does not match canvas {(h, w)}")
        return mask
    if isinstance(spec_entry, dict):
        if "disk" in spec_entry:
            d = spec_entry["disk"]
            cx, cy = _pair(_need(d, "center", path), path + ".disk.center")
            r = _number(_need(d, "radius", path), path + ".disk.radius")
            ys, xs = np.mgrid[0:h, 0:w]
            return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        if "box" in spec_entry:
            x, y, bw, bh = (int(v) for v in spec_entry["box"])
            mask = np.zeros((h, w), dtype=bool)
            mask[max(y, 0):y + bh, max(x, 0):x + bw] = True
            return mask
        if "union" in spec_entry:
            mask = np.zeros((h, w), dtype=bool)
            for i, sub in enumerate(spec_entry["union"]):
                mask |= load_mask(sub, dims, base_dir, f"{path}.union[{i}]")
            return mask
    _fail(path, f"not a valid mask spec: {spec_entry!r}")


def _reduce_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Block-max downsample so any marked canvas pixel marks its latent cell."""
    if factor == 1:
        return mask
    h, w = mask.shape
    return mask.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))


# --- simulator steppers --------------------------------------------------------


def _build_stepper(spec: SceneSpec):
    """Returns a zero-argument generator of (forward FlowField, occlusion|None)
    at canvas resolution, one item per frame transition."""
    sim = spec.simulator
    kind = sim["kind"]
    w, h = spec.canvas
    where = f"{spec.name}:simulator"

    if kind == "rigid":
        variant = _need(sim, "variant", where)
        if variant == "translate":
            motion = Translate(_number(_need(sim, "dx", where), where + ".dx"),
                               _number(_need(sim, "dy", where), where + ".dy"))
        elif variant == "sphere":
            center = _pair(_need(sim, "center", where), where + ".center")
            axis = sim.get("axis", [0.0, 1.0, 0.0])
            if not isinstance(axis, list) or len(axis) != 3:
                _fail(where + ".axis", "expected a 3-vector")
            try:
                motion = SphereRotation(center,
                                        _number(_need(sim, "radius", where), where + ".radius"),
                                        tuple(float(v) for v in axis),
                                        _number(_need(sim, "dtheta", where), where + ".dtheta"))
            except ValueError as exc:
                _fail(where, str(exc))
        elif variant == "radial":
            mask = load_mask(_need(sim, "mask", where), spec.canvas,
                             spec.base_dir, where + ".mask")
            motion = RadialGrowth(_pair(_need(sim, "center", where), where + ".center"),
                                  _number(_need(sim, "rate", where), where + ".rate"),
                                  mask)
        else:
            _fail(where + ".variant", f"unknown rigid variant '{variant}'")

        def run_rigid():
            for _ in range(spec.frames - 1):
                yield rigid_flow(motion, (w, h))
        return run_rigid

    if kind == "fluid":
        sources = _need(sim, "sources", where)
        if not isinstance(sources, list) or not sources:
            _fail(where + ".sources", "need at least one smoke source")
        masks, buoys = [], []
        for i, src in enumerate(sources):
            p = f"{where}.sources[{i}]"
            masks.append(load_mask(_need(src, "mask", p), spec.canvas, spec.base_dir, p + ".mask"))
            buoys.append(_pair(src.get("buoyancy", [0.0, 0.0]), p + ".buoyancy"))
        obstacles = None
        if sim.get("obstacles") is not None:
            obstacles = load_mask(sim["obstacles"], spec.canvas, spec.base_dir,
                                  where + ".obstacles")
        viscosity = _number(sim.get("viscosity", 0.0), where + ".viscosity")
        tol = _number(sim.get("pressure_tol", DEFAULT_PRESSURE_TOL), where + ".pressure_tol")
        cap = _int(sim.get("pressure_cap", DEFAULT_PRESSURE_CAP), where + ".pressure_cap")

        def run_fluid():
            try:
                state = fluid_init_from_mask(masks[0], obstacles, buoys[0],
                                             viscosity=viscosity,
                                             pressure_tol=tol, pressure_cap=cap)
                for mask, buoy in zip(masks[1:], buoys[1:]):
                    state = add_smoke_species(state, mask, buoy)
            except ValueError as exc:
                raise SceneError(f"{where}: {exc}") from exc
            for _ in range(spec.frames - 1):
                state, flow = fluid_step(state)
                yield flow, None
        return run_fluid

    # boids
    count = _int(sim.get("count", 0), where + ".count")
    placement = sim.get("placement", "random")
    prm_doc = sim.get("params", {})
    weights = prm_doc.get("weights", [1.5, 1.0, 1.0])
    if not isinstance(weights, list) or len(weights) != 3:
        _fail(where + ".params.weights", "expected [w_sep, w_align, w_coh]")
    try:
        params = BoidsParams(
            perception_radius=_number(prm_doc.get("perception_radius", 40.0),
                                      where + ".params.perception_radius"),
            separation_radius=_number(prm_doc.get("separation_radius", 12.0),
                                      where + ".params.separation_radius"),
            w_sep=float(weights[0]), w_align=float(weights[1]), w_coh=float(weights[2]),
            max_speed=_number(prm_doc.get("max_speed", 4.0), where + ".params.max_speed"),
            max_force=_number(prm_doc.get("max_force", 0.3), where + ".params.max_force"))
        bounds = Bounds(w, h, sim.get("policy", "wrap"))
    except ValueError as exc:
        _fail(where, str(exc))
    patch_radius = _number(sim.get("patch_radius", 6.0), where + ".patch_radius")

    if placement == "random":
        if count < 1:
            _fail(where + ".count", "random placement needs count >= 1")
        rng = np.random.default_rng(spec.seed)
        margin = min(w, h) * 0.1
        pos = rng.uniform([margin, margin], [w - margin, h - margin], size=(count, 2))
        vel = rng.uniform(-params.max_speed / 2, params.max_speed / 2, size=(count, 2))
    elif isinstance(placement, list):
        try:
            arr = np.asarray(placement, dtype=np.float64).reshape(-1, 4)
        except ValueError:
            _fail(where + ".placement", "expected rows of [x, y, vx, vy]")
        pos, vel = arr[:, :2], arr[:, 2:]
    else:
        _fail(where + ".placement", "expected 'random' or a list of [x, y, vx, vy]")

    def run_boids():
        state = BoidsState(pos, vel, params, bounds)
        for _ in range(spec.frames - 1):
            state, motions = boids_step(state)
            yield rasterize_agent_flow(motions, patch_radius, (w, h)), None
    return run_boids


def initial_agent_positions(spec: SceneSpec) -> np.ndarray | None:
    """Initial boid positions (canvas coordinates), for latent patch cloning."""
    if spec.simulator.get("kind") != "boids":
        return None
    sim = spec.simulator
    if sim.get("placement", "random") == "random":
        rng = np.random.default_rng(spec.seed)
        w, h = spec.canvas
        margin = min(w, h) * 0.1
        count = sim["count"]
        return rng.uniform([margin, margin], [w - margin, h - margin], size=(count, 2))
    return np.asarray(sim["placement"], dtype=np.float64).reshape(-1, 4)[:, :2]


# --- flow/eta emission ---------------------------------------------------------


def scene_flow_sequence(spec: SceneSpec):
    """Yield (backward latent-resolution FlowField, EtaMap) per transition."""
    factor = spec.latent_factor
    threshold = float(spec.eta.get("threshold", 1.0))
    lw, lh = spec.latent_size
    user = np.zeros((lh, lw), dtype=bool)
    for i, m in enumerate(spec.eta.get("masks", [])):
        mask = load_mask(m, spec.canvas, spec.base_dir, f"{spec.name}:eta.masks[{i}]")
        user |= _reduce_mask(mask, factor)

    for fwd, occlusion in _build_stepper(spec)():
        bwd = resample_flow(invert_flow(fwd), factor)
        eta = derive_eta_map(bwd, threshold).eta.astype(bool)
        eta |= user
        if occlusion is not None:
            eta |= _reduce_mask(occlusion, factor)
        yield bwd, EtaMap(eta.astype(np.float64))


# --- manifests -----------------------------------------------------------------


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass
class Manifest:
    name: str
    spec_sha256: str
    frames: int
    files: list[dict] = field(default_factory=list)

    def add(self, out_dir: Path, filename: str, data: bytes):
        _atomic_write(out_dir / filename, data)
        self.files.append({"name": filename, "sha256": _sha256(data), "bytes": len(data)})

    def write(self, out_dir: Path) -> Path:
        doc = {
            "schema": SCHEMA_VERSION,
            "name": self.name,
            "spec_sha256": self.spec_sha256,
            "frames": self.frames,
            "files": sorted(self.files, key=lambda f: f["name"]),
            "versions": {"latentflow": __version__},
        }
        payload = (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()
        path = out_dir / "manifest.json"
        _atomic_write(path, payload)
        return path


def verify_manifest(manifest_path) -> list[str]:
    """Re-hash every recorded file; returns a list of problems (empty = ok)."""
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    problems = []
    for entry in doc.get("files", []):
        file = manifest_path.parent / entry["name"]
        if not file.exists():
            problems.append(f"missing: {entry['name']}")
            continue
        data = file.read_bytes()
        if len(data) != entry["bytes"] or _sha256(data) != entry["sha256"]:
            problems.append(f"modified: {entry['name']}")
    return problems


# --- top-level operations -------------------------------------------------------


def run_scene(spec: SceneSpec, out_dir) -> Path:
    """Run the scene's simulator and emit flow_%04d.flo / eta_%04d.npy plus a
    checksummed manifest. Deterministic for a fixed spec and seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(spec.name, spec.spec_sha256(), spec.frames)
    for i, (flow, eta) in enumerate(scene_flow_sequence(spec)):
        manifest.add(out_dir, f"flow_{i:04d}.flo", flow.flo_bytes())
        buf = io.BytesIO()
        np.lib.format.write_array(buf, eta.eta.astype(np.float32), version=(1, 0))
        manifest.add(out_dir, f"eta_{i:04d}.npy", buf.getvalue())
    return manifest.write(out_dir)


def load_frame_png(path) -> TensorGrid:
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return TensorGrid(arr)


def save_frame_png(grid: TensorGrid) -> bytes:
    arr = np.round(np.clip(grid.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        img = Image.fromarray(arr[:, :, 0], mode="L")
    elif arr.shape[2] == 3:
        img = Image.fromarray(arr, mode="RGB")
    else:
        raise ValueError("frames must have 1 or 3 channels")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _sampler_config(spec: SceneSpec):
    doc = spec.sampler
    sched_doc = doc.get("schedule", {})
    schedule = make_schedule(
        t_train=int(sched_doc.get("t_train", 1000)),
        beta_start=float(sched_doc.get("beta_start", 8.5e-4)),
        beta_end=float(sched_doc.get("beta_end", 1.2e-2)),
        spacing=sched_doc.get("spacing", "sqrt_space"),
        n_steps=int(sched_doc.get("n_steps", 200)),
        tau=int(sched_doc.get("tau", 400)),
    )
    eta = doc.get("eta", "spatial")
    policy = EtaPolicy.spatial() if eta == "spatial" else EtaPolicy.scalar(float(eta))
    params = SamplerParams(
        gamma=float(doc.get("gamma", 7.5)),
        eta_policy=policy,
        attend_set=doc.get("attend_set", "first_and_previous"),
        seed=spec.seed,
        use_inversion=bool(doc.get("use_inversion", True)),
    )
    scale = float(doc.get("denoiser_scale", 10.0))
    return schedule, params, scale


def run_toy_pipeline(spec: SceneSpec, frame_path, out_dir) -> Path:
    """End-to-end generation with the identity codec and the analytic
    denoiser centered on the first frame: simulate, emit frames as PNGs, and
    score the outputs' motion consistency."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    first = load_frame_png(frame_path)
    lw, lh = spec.latent_size
    if (first.height, first.width) != (lh, lw):
        raise SceneError(f"first frame is {first.width}x{first.height}, "
                         f"expected latent size {lw}x{lh}")

    if spec.clone is not None:
        first = _apply_clone(spec, first)

    flows, etas = [], []
    for flow, eta in scene_flow_sequence(spec):
        flows.append(flow)
        etas.append(eta)

    schedule, params, scale = _sampler_config(spec)
    denoiser = AnalyticGaussianDenoiser(first, scale, schedule)
    frames = generate_video(first, flows, etas, denoiser, IdentityCodec(),
                            schedule, params)

    manifest = Manifest(spec.name, spec.spec_sha256(), spec.frames)
    for i, frame in enumerate(frames):
        manifest.add(out_dir, f"frame_{i:04d}.png", save_frame_png(frame))

    score = motion_consistency(frames) if len(frames) >= 2 else None
    report = {"motion_consistency": score, "frames": len(frames)}
    manifest.add(out_dir, "metrics.json",
                 (json.dumps(report, indent=2, sort_keys=True) + "\n").encode())
    return manifest.write(out_dir)


def _apply_clone(spec: SceneSpec, first: TensorGrid) -> TensorGrid:
    doc = spec.clone
    where = f"{spec.name}:clone"
    box = _need(doc, "source_box", where)
    if not isinstance(box, list) or len(box) != 4:
        _fail(where + ".source_box", "expected [x, y, width, height]")
    targets = _need(doc, "targets", where)
    if targets == "agents":
        agents = initial_agent_positions(spec)
        if agents is None:
            _fail(where + ".targets", "'agents' needs a boids simulator")
        targets = (agents / spec.latent_factor).tolist()
    elif not isinstance(targets, list):
        _fail(where + ".targets", "expected 'agents' or a list of positions")
    try:
        return clone_patch(first, [int(v) for v in box], targets)
    except ValueError as exc:
        _fail(where, str(exc))
