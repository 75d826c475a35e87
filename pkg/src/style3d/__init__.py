"""Training-free multi-view stylization and sparse-view mesh recovery.

The package has two halves. The diffusion half inverts a content and a
style image with a deterministic sampler, captures attention features at
a fixed set of layers, and regenerates six orbit views with the targeted
layers computing a fused attention: blended content queries against style
keys and values under a sharpness scale. The geometry half encodes the
six posed views into a triplane, decodes signed distance, color,
deformation and extraction weights at any point, and pulls a watertight
triangle mesh out with a differentiable dual-marching extractor.

Everything runs on a small self-contained toy backend by default; real
pretrained weights plug in behind the same interfaces.
"""

from ._version import VERSION as __version__
from .attention import (
    AttnConfig,
    DEFAULT_TARGET_LAYERS,
    FeatureKind,
    FeatureTensor,
    blend_queries,
    fuse_attention,
    row_entropies,
    select_target_layers,
    standard_attention,
)
from .errors import (
    BackendError,
    ConfigError,
    EvalError,
    Style3DError,
    TrainingDiverged,
)
from .cameras import Camera, generate_rays
from .evaluation import (
    EvalCase,
    ScoreReport,
    StubEmbedder,
    clip_image_image,
    clip_text_image,
    eval_run,
)
from .meshing import (
    MeshResult,
    SdfGrid,
    extract_mesh,
    flexi_regularizer,
    grid_from_field,
    mesh_stats,
    write_glb,
    write_obj,
)
from .mvdiff import (
    BackendHandle,
    DiffusionSchedule,
    FeatureBank,
    LatentTrajectory,
    ToyBackend,
    ViewGrid,
    capture_features,
    ddpm_invert,
    generate_multiview,
    generate_native,
    load_backend,
    make_schedule,
)
from .pipeline import RunConfig, RunReport, run_pipeline, sweep
from .recon import (
    PosedViewBatch,
    ReconConfig,
    ReconstructionModel,
    RenderConfig,
    TrainSchedule,
    Triplane,
    batch_from_views,
    render_views,
    train_loop,
)

__all__ = [
    "AttnConfig",
    "BackendError",
    "BackendHandle",
    "Camera",
    "ConfigError",
    "DEFAULT_TARGET_LAYERS",
    "DiffusionSchedule",
    "EvalCase",
    "EvalError",
    "FeatureBank",
    "FeatureKind",
    "FeatureTensor",
    "LatentTrajectory",
    "MeshResult",
    "PosedViewBatch",
    "ReconConfig",
    "ReconstructionModel",
    "RenderConfig",
    "RunConfig",
    "RunReport",
    "ScoreReport",
    "SdfGrid",
    "Style3DError",
    "StubEmbedder",
    "ToyBackend",
    "TrainSchedule",
    "TrainingDiverged",
    "Triplane",
    "ViewGrid",
    "__version__",
    "batch_from_views",
    "blend_queries",
    "capture_features",
    "clip_image_image",
    "clip_text_image",
    "ddpm_invert",
    "eval_run",
    "extract_mesh",
    "flexi_regularizer",
    "fuse_attention",
    "generate_multiview",
    "generate_native",
    "generate_rays",
    "grid_from_field",
    "load_backend",
    "make_schedule",
    "mesh_stats",
    "render_views",
    "row_entropies",
    "run_pipeline",
    "select_target_layers",
    "standard_attention",
    "sweep",
    "train_loop",
    "write_glb",
    "write_obj",
]
