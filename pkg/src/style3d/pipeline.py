"""End-to-end orchestration: content + style images to stylized views and
a textured mesh, with reproducible artifacts.

A run resolves its configuration (defaults, file, flags), executes the
stages in order (invert style, capture the style bank, invert content,
capture the structure queries, fused multi-view generation, feed-forward
reconstruction, surface extraction) and persists everything into one
config-hashed, timestamp-free directory. report.json is schema-validated
and written last, so a failed run never leaves a partial report behind.
Wall-clock numbers go to a separate timings.json; keeping them out of
report.json is what lets two identical runs produce identical report
bytes.

Parameter sweeps reuse a single captured feature bank, capture does not
depend on the blend weights or the attention scale, and emit a labeled
contact sheet next to the per-value outputs.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Optional, Sequence

import numpy as np
import torch

from ._version import VERSION
from .attention import AttnConfig, DEFAULT_TARGET_LAYERS
from .errors import ConfigError
from .imgio import prepare_image, save_png, to_uint8
from .meshing import extract_mesh, grid_from_field, write_glb, write_obj
from .mvdiff.backend import BackendHandle, load_backend
from .mvdiff.ops import (
    FeatureBank,
    ViewGrid,
    capture_features,
    ddpm_invert,
    generate_multiview,
)
from .recon.data import batch_from_views
from .recon.triplane import ReconConfig, ReconstructionModel, SIGN_CONVENTIONS


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved parameters of one pipeline run."""

    content: str
    style: str
    beta: tuple[float, float] = (0.4, 0.6)
    lambda_scale: float = 1.5
    steps: int = 65
    seed: int = 42
    backend: str = "toy"
    device: str = "cpu"
    out_dir: str = "runs"
    sign_convention: str = "positive_inside"
    loss_weights: tuple = ()
    target_layers: tuple[str, ...] = DEFAULT_TARGET_LAYERS
    weight_source: Optional[str] = None
    grid_res: int = 24
    train_steps: int = 0

    def __post_init__(self) -> None:
        if len(self.beta) != 2 or any(b < 0 for b in self.beta):
            raise ConfigError(f"beta must be two nonnegative weights, got {self.beta}")
        if abs(self.beta[0] + self.beta[1] - 1.0) > 1e-9:
            raise ConfigError(f"beta must sum to 1, got {self.beta}")
        if not self.lambda_scale > 0:
            raise ConfigError(f"lambda_scale must be positive, got {self.lambda_scale}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.backend not in ("toy", "pretrained"):
            raise ConfigError(f"backend must be toy or pretrained, got {self.backend!r}")
        if self.sign_convention not in SIGN_CONVENTIONS:
            raise ConfigError(f"unknown sign_convention {self.sign_convention!r}")
        if self.grid_res < 2:
            raise ConfigError(f"grid_res must be >= 2, got {self.grid_res}")
        if self.train_steps < 0:
            raise ConfigError(f"train_steps must be >= 0, got {self.train_steps}")
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", tuple(sorted(self.loss_weights.items())))

    def attn_config(self) -> AttnConfig:
        return AttnConfig(
            beta=tuple(self.beta),
            lambda_scale=float(self.lambda_scale),
            target_layers=tuple(self.target_layers),
        )

    def loss_weight_dict(self) -> dict:
        return dict(self.loss_weights)

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "beta": [float(self.beta[0]), float(self.beta[1])],
            "content": self.content,
            "device": self.device,
            "grid_res": int(self.grid_res),
            "lambda": float(self.lambda_scale),
            "loss_weights": {k: float(v) for k, v in self.loss_weights},
            "seed": int(self.seed),
            "sign_convention": self.sign_convention,
            "steps": int(self.steps),
            "style": self.style,
            "target_layers": list(self.target_layers),
            "train_steps": int(self.train_steps),
            "weight_source": self.weight_source,
        }

    def config_hash(self) -> str:
        """Twelve hex digits over everything that affects the output
        pixels; the output directory itself is excluded so moving a run
        does not change its identity."""
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


@dataclass
class RunReport:
    config: dict
    config_hash: str
    out_dir: str
    artifacts: dict
    backend: dict
    inputs: dict
    mesh_stats: dict
    timings: dict
    report_path: str


def _report_schema() -> dict:
    with resources.files("style3d.schema").joinpath("report.schema.json").open(
        "r", encoding="utf-8"
    ) as fh:
        return json.load(fh)


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, _report_schema())


def _patch_size(resolution: int) -> int:
    for p in (resolution // 4, 8, 4, 2, 1):
        if p >= 1 and resolution % p == 0:
            return p
    return 1


def _recon_config(cfg: RunConfig, resolution: int) -> ReconConfig:
    return ReconConfig(
        image_size=resolution,
        patch_size=_patch_size(resolution),
        grid_res=cfg.grid_res,
        sign_convention=cfg.sign_convention,
        seed=cfg.seed,
    )


def _mesh_color_fn(tri_field):
    def color_fn(points: torch.Tensor) -> torch.Tensor:
        lo, hi = tri_field.tp.bbox
        _, color = tri_field.sdf_color(points.clamp(lo, hi))
        return color

    return color_fn


def _round6(x: float) -> float:
    return float(f"{x:.6f}")


class _StageClock:
    def __init__(self) -> None:
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def mark(self, stage: str) -> None:
        t1 = time.perf_counter()
        self.timings[stage] = t1 - self._t0
        self._t0 = t1

    def total(self) -> float:
        return sum(self.timings.values())


def _load_run_backend(cfg: RunConfig) -> BackendHandle:
    if cfg.backend == "pretrained":
        return load_backend("pretrained", weight_source=cfg.weight_source)
    return load_backend("toy")


def _capture_banks(
    content_img: np.ndarray,
    style_img: np.ndarray,
    backend: BackendHandle,
    acfg: AttnConfig,
    steps: int,
    clock: Optional[_StageClock] = None,
    need_preserve: bool = True,
):
    """Shared front half of run and sweep: invert both images and capture
    one merged feature bank plus the content trajectory."""
    style_traj = ddpm_invert(style_img, backend, steps, source="style")
    if clock:
        clock.mark("invert_style")
    bank = capture_features(style_traj, backend, acfg, role="style")
    if clock:
        clock.mark("capture_style")
    content_traj = ddpm_invert(content_img, backend, steps, source="content")
    if clock:
        clock.mark("invert_content")
    if need_preserve:
        content_bank = capture_features(content_traj, backend, acfg, role="content")
        bank = bank.merged(content_bank)
    if clock:
        clock.mark("capture_content")
    return bank, content_traj


def reconstruct_views(grid: ViewGrid, cfg: RunConfig, resolution: int):
    """Feed-forward reconstruction of the generated views; returns the
    queryable field. train_steps > 0 refines the model on the views."""
    batch = batch_from_views(list(grid.views), list(grid.poses))
    model = ReconstructionModel(_recon_config(cfg, resolution))
    if cfg.train_steps > 0:
        from .recon.training import TrainSchedule, train_loop

        sched = TrainSchedule(
            stage1_steps=cfg.train_steps, stage2_steps=0, weights=cfg.loss_weight_dict()
        )
        train_loop(model, batch, sched)
    tp = model.make_triplane(batch)
    return model.field(tp)


def run_pipeline(cfg: RunConfig, backend: Optional[BackendHandle] = None) -> RunReport:
    """Execute the full pipeline and persist all artifacts.

    The output directory is out_dir/run-<config hash>; within it, all
    artifacts are written before report.json, and the report is validated
    against the shipped schema before touching disk.
    """
    for label, p in (("content", cfg.content), ("style", cfg.style)):
        if not os.path.isfile(p):
            raise ConfigError(f"{label} image not found: {p}")

    if backend is None:
        backend = _load_run_backend(cfg)
    res = backend.view_resolution
    content_img, content_rec = prepare_image(cfg.content, res)
    style_img, style_rec = prepare_image(cfg.style, res)
    acfg = cfg.attn_config()

    clock = _StageClock()
    bank, content_traj = _capture_banks(
        content_img,
        style_img,
        backend,
        acfg,
        cfg.steps,
        clock,
        need_preserve=acfg.beta[1] > 0.0,
    )
    grid = generate_multiview(
        content_img, bank, backend, acfg, cfg.seed, trajectory=content_traj
    )
    clock.mark("generate")

    field_fn = reconstruct_views(grid, cfg, res)
    clock.mark("reconstruct")

    sdf_grid = grid_from_field(field_fn, cfg.grid_res)
    mesh = extract_mesh(sdf_grid, color_fn=_mesh_color_fn(field_fn))
    clock.mark("extract_mesh")

    run_dir = os.path.join(cfg.out_dir, f"run-{cfg.config_hash()}")
    os.makedirs(run_dir, exist_ok=True)

    save_png(os.path.join(run_dir, "views.png"), grid.tile)
    frame_names = []
    for i, view in enumerate(grid.views):
        name = f"view_{i}.png"
        save_png(os.path.join(run_dir, name), view)
        frame_names.append(name)
    with open(os.path.join(run_dir, "poses.json"), "w", encoding="utf-8") as fh:
        json.dump([c.to_dict() for c in grid.poses], fh, sort_keys=True, indent=2)
        fh.write("\n")
    write_obj(mesh, os.path.join(run_dir, "mesh.obj"))
    write_glb(mesh, os.path.join(run_dir, "mesh.glb"))
    clock.mark("write_artifacts")

    timings = {k: round(v, 6) for k, v in clock.timings.items()}
    with open(os.path.join(run_dir, "timings.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {"stages": timings, "total": round(sum(timings.values()), 6)},
            fh,
            sort_keys=True,
            indent=2,
        )
        fh.write("\n")

    stats = mesh.stats
    artifacts = {
        "mesh_glb": "mesh.glb",
        "mesh_obj": "mesh.obj",
        "poses": "poses.json",
        "timings": "timings.json",
        "view_frames": frame_names,
        "views": "views.png",
    }
    for entry in artifacts.values():
        for name in entry if isinstance(entry, list) else [entry]:
            if not os.path.isfile(os.path.join(run_dir, name)):
                raise RuntimeError(f"artifact missing before report write: {name}")

    report = {
        "artifacts": artifacts,
        "backend": {
            "kind": cfg.backend,
            "identifier": str(getattr(backend, "weight_source", cfg.backend)),
            "view_resolution": int(res),
        },
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "inputs": {"content": content_rec, "style": style_rec},
        "mesh_stats": {
            "area": _round6(stats.area),
            "euler_characteristic": stats.euler_characteristic,
            "face_count": stats.face_count,
            "vertex_count": stats.vertex_count,
            "volume": _round6(stats.volume),
            "watertight": stats.watertight,
        },
        "version": VERSION,
    }
    validate_report(report)
    report_path = os.path.join(run_dir, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")

    return RunReport(
        config=report["config"],
        config_hash=report["config_hash"],
        out_dir=run_dir,
        artifacts=artifacts,
        backend=report["backend"],
        inputs=report["inputs"],
        mesh_stats=report["mesh_stats"],
        timings=timings,
        report_path=report_path,
    )


@dataclass
class SweepResult:
    param: str
    values: tuple
    grids: tuple
    out_dirs: tuple
    contact_sheet: str
    entropies: tuple


def _sweep_configs(param: str, values: Sequence[float], base: AttnConfig) -> list[AttnConfig]:
    """Build every variant up front so one bad value rejects the sweep
    before any compute happens."""
    if param not in ("beta", "lambda"):
        raise ConfigError(f"sweep parameter must be beta or lambda, got {param!r}")
    variants = []
    for v in values:
        try:
            if param == "beta":
                variants.append(
                    replace(base, beta=(float(v), round(1.0 - float(v), 12)))
                )
            else:
                variants.append(replace(base, lambda_scale=float(v)))
        except ValueError as exc:
            raise ConfigError(f"invalid sweep value {float(v):g} for {param}: {exc}")
    return variants


def _contact_sheet(
    grids: Sequence[ViewGrid], labels: Sequence[str], path: str, pad: int = 4
) -> None:
    from PIL import Image, ImageDraw

    tiles = [g.tile for g in grids]
    th, tw = tiles[0].shape[:2]
    strip = 14
    w = len(tiles) * (tw + pad) + pad
    h = th + strip + 2 * pad
    sheet = Image.new("RGB", (w, h), (255, 255, 255))
    draw = ImageDraw.Draw(sheet)
    for i, (tile, label) in enumerate(zip(tiles, labels)):
        x = pad + i * (tw + pad)
        draw.text((x + 1, pad), label, fill=(0, 0, 0))
        sheet.paste(Image.fromarray(to_uint8(tile)), (x, pad + strip))
    save_png(path, np.asarray(sheet))


def sweep(
    param: str,
    values: Sequence[float],
    cfg: RunConfig,
    backend: Optional[BackendHandle] = None,
) -> SweepResult:
    """Generate view sets across one parameter axis.

    Inversion and feature capture run once; only the fused generation
    repeats per value, which is bit-identical to independent runs because
    capture does not read the swept parameters. Lambda sweeps also record
    attention entropies at the fused layers for diagnostics.
    """
    if len(values) == 0:
        raise ConfigError("sweep needs at least one value")
    base = cfg.attn_config()
    variants = _sweep_configs(param, values, base)
    for label, p in (("content", cfg.content), ("style", cfg.style)):
        if not os.path.isfile(p):
            raise ConfigError(f"{label} image not found: {p}")

    if backend is None:
        backend = _load_run_backend(cfg)
    res = backend.view_resolution
    content_img, _ = prepare_image(cfg.content, res)
    style_img, _ = prepare_image(cfg.style, res)

    need_preserve = any(v.beta[1] > 0.0 for v in variants)
    bank, content_traj = _capture_banks(
        content_img, style_img, backend, base, cfg.steps, need_preserve=need_preserve
    )

    sweep_dir = os.path.join(cfg.out_dir, f"sweep-{param}-{cfg.config_hash()}")
    os.makedirs(sweep_dir, exist_ok=True)
    grids, out_dirs, entropies, labels = [], [], [], []
    for v, vcfg in zip(values, variants):
        grid = generate_multiview(
            content_img,
            bank,
            backend,
            vcfg,
            cfg.seed,
            trajectory=content_traj,
            record_entropy=(param == "lambda"),
        )
        label = f"{'beta_c' if param == 'beta' else 'lambda'}={float(v):g}"
        vdir = os.path.join(sweep_dir, f"{param}_{float(v):g}")
        os.makedirs(vdir, exist_ok=True)
        save_png(os.path.join(vdir, "views.png"), grid.tile)
        for i, view in enumerate(grid.views):
            save_png(os.path.join(vdir, f"view_{i}.png"), view)
        rec = getattr(grid, "_entropies", None)
        flat = [x for per_layer in rec.values() for x in per_layer] if rec else []
        mean_entropy = float(np.mean(flat)) if flat else float("nan")
        grids.append(grid)
        out_dirs.append(vdir)
        entropies.append(mean_entropy)
        labels.append(label)

    sheet_path = os.path.join(sweep_dir, "contact_sheet.png")
    _contact_sheet(grids, labels, sheet_path)
    return SweepResult(
        param=param,
        values=tuple(float(v) for v in values),
        grids=tuple(grids),
        out_dirs=tuple(out_dirs),
        contact_sheet=sheet_path,
        entropies=tuple(entropies),
    )
