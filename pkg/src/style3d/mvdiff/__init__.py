from .backend import (
    AttentionTap,
    BackendHandle,
    ToyBackend,
    load_backend,
    TOY_LAYER_NAMES,
)
from .ops import (
    FeatureBank,
    LatentTrajectory,
    ViewGrid,
    capture_features,
    ddpm_invert,
    generate_multiview,
    generate_native,
    tile_views,
    untile_views,
)
from .scheduler import DiffusionSchedule, ddim_step, make_schedule

__all__ = [
    "AttentionTap",
    "BackendHandle",
    "ToyBackend",
    "load_backend",
    "TOY_LAYER_NAMES",
    "FeatureBank",
    "LatentTrajectory",
    "ViewGrid",
    "capture_features",
    "ddpm_invert",
    "generate_multiview",
    "generate_native",
    "tile_views",
    "untile_views",
    "DiffusionSchedule",
    "ddim_step",
    "make_schedule",
]
