"""Neural-model harness: feed physics-derived flow/eta artifacts through a
pretrained latent diffusion model's sampling loop."""

from .attention import MCFAAttnProcessor, MCFAController, SelfAttentionBlock
from .model import (DiffusersAdapter, LatentDiffusionAdapter,
                    TinyLatentDiffusion, build_adapter, load_diffusers_model)
from .pipeline import (HarnessConfig, attention_patch_box,
                       clip_frame_consistency, latent_flow_correlation,
                       load_artifacts, run_pipeline, seed_frame_with_clones)

__all__ = [
    "MCFAAttnProcessor", "MCFAController", "SelfAttentionBlock",
    "DiffusersAdapter", "LatentDiffusionAdapter", "TinyLatentDiffusion",
    "build_adapter", "load_diffusers_model",
    "HarnessConfig", "attention_patch_box", "clip_frame_consistency",
    "latent_flow_correlation", "load_artifacts", "run_pipeline",
    "seed_frame_with_clones",
]
