"""Two-stage fitting loop with a cosine learning-rate schedule.

The loop renders the model's field against a posed batch: stage 1
supervises color volumetrically, stage 2 extracts the surface each step
and supervises depth and normals through the rasterizer, with the grid
regularizer keeping deformations and weights near neutral. The learning
rate starts exactly at the configured value and follows cosine annealing
down to min_lr; a non-finite loss aborts immediately.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import torch

from ..errors import TrainingDiverged
from .data import PosedViewBatch
from .losses import LossReport, loss_stage1, loss_stage2
from .rendering import RenderConfig, render_views

DEFAULT_LR = 4.0e-5


@dataclass
class TrainSchedule:
    stage1_steps: int = 200
    stage2_steps: int = 0
    lr: float = DEFAULT_LR
    min_lr: float = 0.0
    optimizer: str = "sgd"
    momentum: float = 0.9
    weights: Optional[dict] = None
    render_stage1: RenderConfig = dc_field(
        default_factory=lambda: RenderConfig(mode="volumetric", n_samples=48)
    )
    render_stage2: RenderConfig = dc_field(
        default_factory=lambda: RenderConfig(mode="mesh", mesh_grid_res=16)
    )

    def __post_init__(self) -> None:
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.stage1_steps + self.stage2_steps < 1:
            raise ValueError("schedule must run at least one step")
        if not self.lr >= 0.0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainResult:
    history: list[dict]
    lrs: list[float]
    checkpoint: dict

    @property
    def final_loss(self) -> float:
        return self.history[-1]["total"]

    def save(self, path: str) -> None:
        torch.save(self.checkpoint, path)


def make_checkpoint(model: torch.nn.Module, config: Optional[dict] = None) -> dict:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return {
        "format": "style3d-checkpoint-v1",
        "config": dict(config or {}),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "state": state,
    }


def load_checkpoint(model: torch.nn.Module, path: str) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != "style3d-checkpoint-v1":
        raise ValueError(f"{path} is not a recognized checkpoint")
    own = model.state_dict()
    for key, shape in payload["shapes"].items():
        if key not in own:
            raise ValueError(f"checkpoint parameter {key!r} has no home in the model")
        if list(own[key].shape) != shape:
            raise ValueError(
                f"checkpoint parameter {key!r} has shape {shape}, model wants "
                f"{list(own[key].shape)}"
            )
    model.load_state_dict(payload["state"])
    return payload["config"]


def _gt_dict(data: PosedViewBatch, stage: int) -> dict:
    gt = {"rgb": data.images, "mask": data.masks}
    if stage == 2:
        if data.depths is None or data.normals is None:
            raise ValueError("stage-2 supervision needs depth and normal rasters")
        gt["depth"] = data.depths
        gt["normal"] = data.normals
    return gt


def _stage2_forward(model, field, data: PosedViewBatch, cfg: RenderConfig):
    from ..meshing import extract_mesh, flexi_regularizer, grid_from_field
    from .rendering import _rasterize_one

    grid = grid_from_field(field, cfg.mesh_grid_res, bbox=cfg.bbox)
    lo, hi = cfg.bbox

    def color_fn(pts: torch.Tensor) -> torch.Tensor:
        _, col = field.sdf_color(pts.clamp(lo, hi))
        return col

    mesh = extract_mesh(grid, color_fn=color_fn)
    outs = [
        _rasterize_one(mesh.vertices, mesh.faces, mesh.colors, cam, cfg)
        for cam in data.cameras
    ]
    pred = {k: torch.stack([o[k] for o in outs]) for k in outs[0]}
    pred["reg"] = flexi_regularizer(grid)
    return pred


def train_loop(
    model: torch.nn.Module, data: PosedViewBatch, schedule: TrainSchedule
) -> TrainResult:
    """Fit the model to the batch; returns per-step loss reports, the
    learning-rate trace and a self-describing checkpoint."""
    total_steps = schedule.stage1_steps + schedule.stage2_steps
    if schedule.optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=schedule.lr)
    else:
        opt = torch.optim.SGD(
            model.parameters(), lr=schedule.lr, momentum=schedule.momentum
        )
    cosine = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(total_steps, 1), eta_min=schedule.min_lr
    )
    history: list[dict] = []
    lrs: list[float] = []

    for step in range(total_steps):
        stage = 1 if step < schedule.stage1_steps else 2
        lr_now = float(opt.param_groups[0]["lr"])
        lrs.append(lr_now)

        tp = model.make_triplane(data)
        field = model.field(tp)
        gt = _gt_dict(data, stage)
        if stage == 1:
            out = render_views(field, data.cameras, schedule.render_stage1)
            report: LossReport = loss_stage1(out, gt, weights=schedule.weights)
        else:
            pred = _stage2_forward(model, field, data, schedule.render_stage2)
            report = loss_stage2(pred, gt, weights=schedule.weights)

        if not bool(torch.isfinite(report.total)):
            raise TrainingDiverged(
                f"non-finite loss at step {step} (stage {stage}): "
                + str({k: float(v.detach()) for k, v in report.terms.items()})
            )

        opt.zero_grad()
        report.total.backward()
        opt.step()
        cosine.step()

        entry = {"step": step, "stage": stage, "lr": lr_now}
        entry.update(report.detached())
        history.append(entry)

    return TrainResult(
        history=history,
        lrs=lrs,
        checkpoint=make_checkpoint(model, {"schedule": str(schedule)}),
    )
