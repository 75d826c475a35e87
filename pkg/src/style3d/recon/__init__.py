from .data import PosedViewBatch, batch_from_views, load_batch, save_batch
from .encoder import ViewEncoder, pose_features
from .losses import (
    STAGE1_WEIGHTS,
    STAGE2_WEIGHTS,
    FeatureDistance,
    LossReport,
    loss_stage1,
    loss_stage2,
)
from .rendering import RenderConfig, render_views
from .training import (
    DEFAULT_LR,
    TrainResult,
    TrainSchedule,
    load_checkpoint,
    make_checkpoint,
    train_loop,
)
from .triplane import (
    DirectTriplaneModel,
    FieldHeads,
    FieldSample,
    PLANE_AXES,
    ReconConfig,
    ReconstructionModel,
    TriField,
    Triplane,
    TriplaneDecoder,
    sample_triplane,
    seed_parameters,
)

__all__ = [
    "DEFAULT_LR",
    "DirectTriplaneModel",
    "FeatureDistance",
    "FieldHeads",
    "FieldSample",
    "LossReport",
    "PLANE_AXES",
    "PosedViewBatch",
    "ReconConfig",
    "ReconstructionModel",
    "RenderConfig",
    "STAGE1_WEIGHTS",
    "STAGE2_WEIGHTS",
    "TrainResult",
    "TrainSchedule",
    "TriField",
    "Triplane",
    "TriplaneDecoder",
    "ViewEncoder",
    "batch_from_views",
    "load_batch",
    "load_checkpoint",
    "loss_stage1",
    "loss_stage2",
    "make_checkpoint",
    "pose_features",
    "render_views",
    "sample_triplane",
    "save_batch",
    "seed_parameters",
    "train_loop",
]
