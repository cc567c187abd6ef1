"""Physics-driven optical flows and latent-space warped diffusion sampling.

The package splits into flow/grid value types (:mod:`latentflow.grids`,
:mod:`latentflow.warp`), physics simulators that emit forward velocity
fields (:mod:`latentflow.fluid`, :mod:`latentflow.boids`,
:mod:`latentflow.rigid`), the diffusion sampling loop
(:mod:`latentflow.schedule`, :mod:`latentflow.sampler`), quality metrics
(:mod:`latentflow.metrics`), and scene orchestration plus the CLI
(:mod:`latentflow.scene`, :mod:`latentflow.cli`).
"""

from ._version import __version__
from .boids import (AgentMotion, BoidsParams, BoidsState, Bounds, boids_step,
                    rasterize_agent_flow)
from .fluid import (FluidState, PressureSolveWarning, add_smoke_species,
                    divergence, fluid_init_from_mask, fluid_step)
from .grids import BACKWARD, FORWARD, EtaMap, FlowField, TensorGrid
from .metrics import (CorrelationReport, ImagePair, LowConfidenceWarning,
                      correlation_experiment, estimate_flow,
                      motion_consistency, ssim)
from .rigid import RadialGrowth, SphereRotation, Translate, rigid_flow
from .sampler import (AnalyticGaussianDenoiser, AttentionInputs, Denoiser,
                      EtaPolicy, IdentityCodec, LoopCheckpoint, PromptPair,
                      SamplerParams, VarianceClampWarning,
                      analytic_gaussian_denoiser, cfg_combine, ddim_inversion_step,
                      ddim_step, generate_video, iter_video, mcfa_attention,
                      stream_rng)
from .scene import (Manifest, SceneError, SceneSpec, load_scene, run_scene,
                    run_toy_pipeline, scene_flow_sequence, verify_manifest)
from .schedule import NoiseSchedule, make_schedule
from .warp import (clone_patch, derive_eta_map, flow_cosine_correlation,
                   invert_flow, resample_flow, warp_backward)

__all__ = [
    "__version__",
    "AgentMotion", "BoidsParams", "BoidsState", "Bounds", "boids_step",
    "rasterize_agent_flow",
    "FluidState", "PressureSolveWarning", "add_smoke_species", "divergence",
    "fluid_init_from_mask", "fluid_step",
    "BACKWARD", "FORWARD", "EtaMap", "FlowField", "TensorGrid",
    "CorrelationReport", "ImagePair", "LowConfidenceWarning",
    "correlation_experiment", "estimate_flow", "motion_consistency", "ssim",
    "RadialGrowth", "SphereRotation", "Translate", "rigid_flow",
    "AnalyticGaussianDenoiser", "AttentionInputs", "Denoiser", "EtaPolicy",
    "IdentityCodec", "LoopCheckpoint", "PromptPair", "SamplerParams",
    "VarianceClampWarning", "analytic_gaussian_denoiser", "cfg_combine",
    "ddim_inversion_step", "ddim_step", "generate_video", "iter_video",
    "mcfa_attention", "stream_rng",
    "Manifest", "SceneError", "SceneSpec", "load_scene", "run_scene",
    "run_toy_pipeline", "scene_flow_sequence", "verify_manifest",
    "NoiseSchedule", "make_schedule",
    "clone_patch", "derive_eta_map", "flow_cosine_correlation", "invert_flow",
    "resample_flow", "warp_backward",
]
