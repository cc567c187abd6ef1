"""Drive a pretrained latent diffusion model with primary-emitted artifacts.

The frame loop mirrors the library's analytic-denoiser loop exactly - encode
the previous frame, invert it with the positive conditioning only, warp the
inversion-depth latent with the scene's backward flow, then reverse-diffuse
with guided, cross-frame-attended noise estimates and per-pixel eta - but
every noise estimate comes from the wrapped model's UNet with its
self-attention blocks patched to attend to the first and previous frames.

Flow fields, eta maps, warping, DDIM stepping, guidance, metrics and RNG
streams all come from :mod:`latentflow`; this package adds only the model
glue.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from latentflow.grids import EtaMap, FlowField, TensorGrid
from latentflow.metrics import ImagePair, correlation_experiment, motion_consistency
from latentflow.sampler import (cfg_combine, ddim_inversion_step, ddim_step,
                                stream_rng)
from latentflow.scene import load_frame_png, save_frame_png, verify_manifest
from latentflow.warp import warp_backward

from .model import build_adapter

log = logging.getLogger("sdharness")

ATTEND_SETS = ("self", "first", "previous", "first_and_previous")

# rng stream purposes (step noise mirrors the primary's generation loop)
_PURPOSE_STEP = 0
_PURPOSE_ATTEND_FIRST = 1
_PURPOSE_ATTEND_PREV = 2


@dataclass
class HarnessConfig:
    manifest: Path
    first_frame: Path
    output_dir: Path
    prompt: str = ""
    negative_prompt: str = ""
    gamma: float = 7.5
    tau: int = 400
    steps: int = 200
    attend_set: str = "first_and_previous"
    eta: object = "spatial"      # "spatial" or a scalar in [0, 1]
    seed: int = 0
    model: str = "tiny"          # "tiny" or a diffusers checkpoint id/path
    device: str = "cpu"
    clip_model: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.manifest = Path(self.manifest)
        self.first_frame = Path(self.first_frame)
        self.output_dir = Path(self.output_dir)
        if self.attend_set not in ATTEND_SETS:
            raise ValueError(f"attend_set must be one of {ATTEND_SETS}")

    @classmethod
    def from_json(cls, path) -> "HarnessConfig":
        doc = json.loads(Path(path).read_text())
        known = {k: doc.pop(k) for k in list(doc)
                 if k in cls.__dataclass_fields__ and k != "extra"}
        return cls(extra=doc, **known)


def load_artifacts(manifest_path: Path):
    """Read the flow/eta sequences recorded in a primary manifest."""
    manifest_path = Path(manifest_path)
    problems = verify_manifest(manifest_path)
    if problems:
        raise RuntimeError(f"manifest failed verification: {problems}")
    doc = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    flows = [FlowField.load_flo(base / e["name"]) for e in doc["files"]
             if e["name"].startswith("flow_")]
    etas = [EtaMap.load_npy(base / e["name"]) for e in doc["files"]
            if e["name"].startswith("eta_")]
    if len(flows) != len(etas) or not flows:
        raise RuntimeError("manifest holds no matching flow/eta sequence")
    return flows, etas


def _renoise(schedule, clean: np.ndarray, t: int, rng) -> np.ndarray:
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * clean + np.sqrt(1.0 - ab) * rng.standard_normal(clean.shape)


def _invert(adapter, schedule, latent: np.ndarray, cond) -> np.ndarray:
    z = latent
    for t_from, t_to in schedule.inversion_pairs():
        eps = adapter.predict_eps(z, t_from, cond)
        z = ddim_inversion_step(schedule, TensorGrid(z), TensorGrid(eps),
                                t_from, t_to).data
    return z


def attention_patch_box(attn_map: np.ndarray, threshold: float = 0.5,
                        pad: int = 1) -> tuple[int, int, int, int]:
    """Bounding box (x, y, w, h) of the region where a cross-attention map
    exceeds ``threshold`` times its peak; this locates the latent patch that
    belongs to a token (e.g. the one subject in the first frame)."""
    attn_map = np.asarray(attn_map, dtype=np.float64)
    if attn_map.ndim != 2 or attn_map.max() <= 0:
        raise ValueError("need a non-degenerate 2-D attention map")
    hot = attn_map >= threshold * attn_map.max()
    ys, xs = np.nonzero(hot)
    x0 = max(int(xs.min()) - pad, 0)
    y0 = max(int(ys.min()) - pad, 0)
    x1 = min(int(xs.max()) + pad, attn_map.shape[1] - 1)
    y1 = min(int(ys.max()) + pad, attn_map.shape[0] - 1)
    return (x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def seed_frame_with_clones(adapter, schedule, first: TensorGrid, clone_cfg: dict,
                           pos, neg, gamma: float, seed: int):
    """Clone a latent patch to the given positions on the first frame's
    inverted latent, regenerate, and return the resulting frame.

    ``clone_cfg`` holds ``targets`` (latent coordinates) plus either an
    explicit ``source_box`` or an ``attention_map`` (.npy path) with an
    optional ``threshold``. The patch copy itself is the library's
    ``clone_patch`` applied at the inversion depth.
    """
    from latentflow.warp import clone_patch

    if "source_box" in clone_cfg:
        box = tuple(int(v) for v in clone_cfg["source_box"])
    else:
        attn = np.load(clone_cfg["attention_map"])
        box = attention_patch_box(attn, float(clone_cfg.get("threshold", 0.5)))
    targets = clone_cfg["targets"]

    z0 = adapter.encode(first.data)
    z_tau = _invert(adapter, schedule, z0, pos)
    z_tau = clone_patch(TensorGrid(z_tau), box, targets).data

    zeta = z_tau
    for t_from, t_to in schedule.generation_pairs():
        eps_c = adapter.predict_eps(zeta, t_to, pos)
        if gamma == 1.0:
            eps = eps_c
        else:
            eps_u = adapter.predict_eps(zeta, t_to, neg)
            eps = cfg_combine(TensorGrid(eps_c), TensorGrid(eps_u), gamma).data
        rng = stream_rng(seed, 0, t_from, _PURPOSE_STEP)
        zeta = ddim_step(schedule, TensorGrid(zeta), TensorGrid(eps),
                         t_from, t_to, 0.0, rng).data
    return TensorGrid(np.clip(adapter.decode(zeta), 0.0, 1.0))


def run_pipeline(config: HarnessConfig, adapter=None) -> dict:
    """Generate a video from the primary's flow/eta artifacts and score it.

    Writes frame PNGs plus ``report.json`` (the primary metrics schema:
    per-pair values and their mean, with a frame-consistency block when an
    embedding model is available) and returns the report.
    """
    adapter = adapter or build_adapter(config.model, config.device)
    flows, etas = load_artifacts(config.manifest)
    schedule = adapter.schedule(config.steps, config.tau)

    first = load_frame_png(config.first_frame)
    pos = adapter.embed(config.prompt)
    neg = adapter.embed(config.negative_prompt)
    if config.extra.get("clone"):
        first = seed_frame_with_clones(adapter, schedule, first,
                                       config.extra["clone"], pos, neg,
                                       config.gamma, config.seed)
    z0_clean = adapter.encode(first.data)
    lh, lw = z0_clean.shape[:2]
    if flows[0].shape != (lh, lw):
        raise RuntimeError(f"flows are {flows[0].shape}, model latents are {(lh, lw)}")
    gen_pairs = schedule.generation_pairs()
    seed = config.seed

    config.output_dir.mkdir(parents=True, exist_ok=True)
    frames = [first]
    (config.output_dir / "frame_0000.png").write_bytes(save_frame_png(first))

    prev_image = first
    for f in range(1, len(flows) + 1):
        log.info("frame %d/%d", f, len(flows))
        prev_clean = adapter.encode(prev_image.data)
        z_tau = _invert(adapter, schedule, prev_clean, pos)
        zeta = warp_backward(TensorGrid(z_tau), flows[f - 1], "clamp").data
        eta = etas[f - 1] if config.eta == "spatial" else float(config.eta)

        for t_from, t_to in gen_pairs:
            stores = _attended_stores(adapter, config.attend_set, schedule, zeta,
                                      z0_clean, prev_clean, seed, f, t_to, pos)
            eps_c = adapter.attended_eps(zeta, t_to, pos, stores)
            if config.gamma == 1.0:
                eps = eps_c
            else:
                stores_n = _attended_stores(adapter, config.attend_set, schedule, zeta,
                                            z0_clean, prev_clean, seed, f, t_to, neg)
                eps_u = adapter.attended_eps(zeta, t_to, neg, stores_n)
                eps = cfg_combine(TensorGrid(eps_c), TensorGrid(eps_u), config.gamma).data
            rng = stream_rng(seed, f, t_from, _PURPOSE_STEP)
            zeta = ddim_step(schedule, TensorGrid(zeta), TensorGrid(eps),
                             t_from, t_to, eta, rng).data

        image = TensorGrid(np.clip(adapter.decode(zeta), 0.0, 1.0))
        (config.output_dir / f"frame_{f:04d}.png").write_bytes(save_frame_png(image))
        frames.append(image)
        prev_image = image

    report = _score(frames, config)
    (config.output_dir / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def _attended_stores(adapter, attend_set, schedule, zeta, z0_clean, prev_clean,
                     seed, frame, t, cond):
    """Capture the attended latents' self-attention banks for one UNet call."""
    if attend_set == "self":
        return [adapter.capture_pass(zeta, t, cond)]
    stores = []
    if attend_set in ("first", "first_and_previous"):
        rng = stream_rng(seed, frame, t, _PURPOSE_ATTEND_FIRST)
        stores.append(adapter.capture_pass(_renoise(schedule, z0_clean, t, rng), t, cond))
    if attend_set in ("previous", "first_and_previous"):
        rng = stream_rng(seed, frame, t, _PURPOSE_ATTEND_PREV)
        stores.append(adapter.capture_pass(_renoise(schedule, prev_clean, t, rng), t, cond))
    return stores


def _score(frames, config: HarnessConfig) -> dict:
    per_pair = [motion_consistency(frames[i:i + 2]) for i in range(len(frames) - 1)]
    report = {
        "per_pair": per_pair,
        "mean": float(np.mean(per_pair)) if per_pair else None,
        "frames": len(frames),
    }
    fc = clip_frame_consistency(frames, config.clip_model, config.device)
    report["frame_consistency"] = fc
    return report


def clip_frame_consistency(frames, model_id: str | None, device: str = "cpu"):
    """Mean cosine similarity of consecutive frames' embeddings under an
    image-embedding model; returns None (with the reason logged) when no
    model is configured or loadable."""
    if not model_id:
        log.info("frame consistency skipped: no embedding model configured")
        return None
    try:
        import torch
        from transformers import CLIPImageProcessor, CLIPVisionModelWithProjection
        processor = CLIPImageProcessor.from_pretrained(model_id)
        model = CLIPVisionModelWithProjection.from_pretrained(model_id).to(device).eval()
    except Exception as exc:  # model not available locally
        log.warning("frame consistency skipped: %s", exc)
        return None
    import torch
    embeds = []
    with torch.no_grad():
        for frame in frames:
            arr = (np.repeat(frame.data, 3, axis=2) if frame.channels == 1
                   else frame.data)
            inputs = processor(images=arr, do_rescale=False, return_tensors="pt")
            emb = model(**inputs.to(device)).image_embeds[0]
            embeds.append(emb / emb.norm())
    sims = [float((a * b).sum()) for a, b in zip(embeds[:-1], embeds[1:])]
    return {"per_pair": sims, "mean": float(np.mean(sims))}


def latent_flow_correlation(frames, tau: int, adapter=None, steps: int = 200,
                            model: str = "tiny", device: str = "cpu"):
    """Correlate flows estimated on real frames with flows estimated on their
    inverted noise latents at the given depth."""
    frames = [f if isinstance(f, TensorGrid) else load_frame_png(f) for f in frames]
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    adapter = adapter or build_adapter(model, device)
    schedule = adapter.schedule(steps, tau)
    pos = adapter.embed("")

    latents = []
    for frame in frames:
        clean = adapter.encode(frame.data)
        latents.append(TensorGrid(_invert(adapter, schedule, clean, pos)))

    rgb_pairs = [ImagePair(a, b) for a, b in zip(frames[:-1], frames[1:])]
    latent_pairs = list(zip(latents[:-1], latents[1:]))
    return correlation_experiment(rgb_pairs, latent_pairs)
