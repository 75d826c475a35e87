"""Inversion, feature capture and fused multi-view generation.

The stylization recipe: invert the style and content images to the top of
the noise schedule, capture attention features while replaying the
sampler from each endpoint, then sample once more from the content
endpoint with the targeted layers' attention swapped for the fused
operator. Capture replays the exact sampling dynamics (rather than
evaluating at the stored inversion latents) so that a bank captured from
an image reproduces, feature for feature, what an unmodified sampling
pass from that image's endpoint would compute.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from ..attention import (
    AttnConfig,
    FeatureKind,
    FeatureTensor,
    fuse_attention,
    attention_weights,
    row_entropies,
    select_target_layers,
)
from ..cameras import Camera
from ..imgio import to_uint8
from .backend import TILE_COLS, TILE_ROWS, BackendHandle
from .scheduler import DiffusionSchedule, ddim_step

BankKey = tuple[str, int]


def tile_views(views: Sequence[np.ndarray]) -> np.ndarray:
    """Pack six equally sized RGB views into one 3x2 (rows x cols) tile,
    row-major: view 0 top-left, view 1 top-right, and so on down."""
    if len(views) != 6:
        raise ValueError(f"expected exactly 6 views, got {len(views)}")
    views = [np.asarray(v) for v in views]
    shape = views[0].shape
    if len(shape) != 3 or shape[2] != 3 or shape[0] < 1 or shape[1] < 1:
        raise ValueError(f"views must be (H, W, 3) rasters, got {shape}")
    for i, v in enumerate(views):
        if v.shape != shape:
            raise ValueError(
                f"view {i} has shape {v.shape}, expected {shape} like view 0"
            )
    rows = [
        np.concatenate(views[r * TILE_COLS : (r + 1) * TILE_COLS], axis=1)
        for r in range(TILE_ROWS)
    ]
    return np.concatenate(rows, axis=0)


def untile_views(tile: np.ndarray) -> list[np.ndarray]:
    """Inverse of tile_views; exact crop, no resampling."""
    tile = np.asarray(tile)
    if tile.ndim != 3 or tile.shape[2] != 3:
        raise ValueError(f"tile must be (H, W, 3), got {tile.shape}")
    if tile.shape[0] % TILE_ROWS or tile.shape[1] % TILE_COLS:
        raise ValueError(
            f"tile shape {tile.shape[:2]} is not divisible into a "
            f"{TILE_ROWS}x{TILE_COLS} grid"
        )
    vh = tile.shape[0] // TILE_ROWS
    vw = tile.shape[1] // TILE_COLS
    out = []
    for r in range(TILE_ROWS):
        for c in range(TILE_COLS):
            out.append(tile[r * vh : (r + 1) * vh, c * vw : (c + 1) * vw].copy())
    return out


@dataclass(frozen=True)
class LatentTrajectory:
    """Inversion path of one image: latents[0] is the encoded image,
    latents[-1] the endpoint at the top of the schedule."""

    latents: torch.Tensor  # (steps + 1, C, h, w)
    schedule: DiffusionSchedule
    conditioning: torch.Tensor
    source: str  # "content" | "style"

    def __post_init__(self) -> None:
        if self.source not in ("content", "style"):
            raise ValueError(f"trajectory source must be content or style, got {self.source!r}")
        if self.latents.shape[0] != self.schedule.steps + 1:
            raise ValueError(
                f"trajectory holds {self.latents.shape[0]} latents for "
                f"{self.schedule.steps} steps (want steps + 1)"
            )
        if not bool(torch.isfinite(self.latents).all()):
            raise ValueError("non-finite latent in trajectory")

    @property
    def steps(self) -> int:
        return self.schedule.steps


@dataclass
class FeatureBank:
    """Captured attention features keyed by (layer id, denoising step).

    kv holds style key/value pairs, preserve holds content queries; a bank
    may carry either or both. Banks merge by key union, never by overwrite.
    """

    kv: dict[BankKey, tuple[FeatureTensor, FeatureTensor]] = field(default_factory=dict)
    preserve: dict[BankKey, FeatureTensor] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    steps: Optional[int] = None

    def merged(self, other: "FeatureBank") -> "FeatureBank":
        if self.steps is not None and other.steps is not None and self.steps != other.steps:
            raise ValueError(
                f"cannot merge banks captured over {self.steps} and {other.steps} steps"
            )
        overlap = set(self.kv) & set(other.kv)
        if overlap:
            raise ValueError(f"key/value entries collide on merge: {sorted(overlap)[0]}")
        overlap = set(self.preserve) & set(other.preserve)
        if overlap:
            raise ValueError(f"preserve entries collide on merge: {sorted(overlap)[0]}")
        prov = {**self.provenance}
        for k, v in other.provenance.items():
            if k in prov and prov[k] != v:
                prov[k] = [prov[k], v]
            else:
                prov[k] = v
        return FeatureBank(
            kv={**self.kv, **other.kv},
            preserve={**self.preserve, **other.preserve},
            provenance=prov,
            steps=self.steps if self.steps is not None else other.steps,
        )

    def require_complete(
        self,
        layers: Sequence[str],
        cfg: AttnConfig,
        need_preserve: bool,
    ) -> None:
        """Check there is an entry for every (target layer, active step)
        pair; raises naming the first missing key."""
        if self.steps is None:
            raise ValueError("feature bank carries no step count")
        for t in range(self.steps, 0, -1):
            if not cfg.step_active(t):
                continue
            for layer in layers:
                if (layer, t) not in self.kv:
                    raise ValueError(
                        f"feature bank has no key/value entry for layer "
                        f"{layer!r} at step {t}"
                    )
                if need_preserve and (layer, t) not in self.preserve:
                    raise ValueError(
                        f"feature bank has no preserved query for layer "
                        f"{layer!r} at step {t}"
                    )

    def nbytes(self) -> int:
        total = 0
        for kf, vf in self.kv.values():
            total += kf.data.nbytes + vf.data.nbytes
        for qf in self.preserve.values():
            total += qf.data.nbytes
        return total


@dataclass(frozen=True)
class ViewGrid:
    """Six generated views plus their tile form and camera poses."""

    views: tuple[np.ndarray, ...]
    tile: np.ndarray
    poses: tuple[Camera, ...]
    seed: int

    def __post_init__(self) -> None:
        if len(self.views) != 6 or len(self.poses) != 6:
            raise ValueError("a view grid holds exactly six views and six poses")
        rebuilt = tile_views(list(self.views))
        if rebuilt.shape != self.tile.shape or not np.array_equal(rebuilt, self.tile):
            raise ValueError("tile does not match its views")

    @staticmethod
    def from_tile(tile: np.ndarray, poses: Sequence[Camera], seed: int) -> "ViewGrid":
        views = untile_views(tile)
        return ViewGrid(tuple(views), np.asarray(tile), tuple(poses), seed)


class _CaptureTap:
    """Observe-only tap that records features at target layers."""

    def __init__(self, layers: set[str], cfg: AttnConfig, role: str):
        self.layers = layers
        self.cfg = cfg
        self.role = role
        self.kv: dict[BankKey, tuple[FeatureTensor, FeatureTensor]] = {}
        self.preserve: dict[BankKey, FeatureTensor] = {}

    def replace(self, layer_id, timestep, q, k, v):
        return None

    def observe(self, layer_id, timestep, q, k, v, out):
        if layer_id not in self.layers or not self.cfg.step_active(timestep):
            return
        if self.role == "style":
            self.kv[(layer_id, timestep)] = (
                FeatureTensor(k.detach().clone(), layer_id, timestep, FeatureKind.KEY),
                FeatureTensor(v.detach().clone(), layer_id, timestep, FeatureKind.VALUE),
            )
        else:
            self.preserve[(layer_id, timestep)] = FeatureTensor(
                q.detach().clone(), layer_id, timestep, FeatureKind.QUERY_PRESERVE
            )


class _FusionTap:
    """Swaps targeted layers' attention for the fused operator."""

    def __init__(
        self,
        bank: FeatureBank,
        layers: set[str],
        cfg: AttnConfig,
        use_preserve: bool,
        record_entropy: bool = False,
    ):
        self.bank = bank
        self.layers = layers
        self.cfg = cfg
        self.use_preserve = use_preserve
        self.record_entropy = record_entropy
        self.entropies: dict[str, list[float]] = {}

    def replace(self, layer_id, timestep, q, k, v):
        if layer_id not in self.layers or not self.cfg.step_active(timestep):
            return None
        q_ft = FeatureTensor(q, layer_id, timestep, FeatureKind.QUERY)
        k_s, v_s = self.bank.kv[(layer_id, timestep)]
        if self.use_preserve:
            q_p = self.bank.preserve[(layer_id, timestep)]
        else:
            q_p = q_ft  # unused at beta_p == 0; keeps shapes aligned
        fused = fuse_attention(q_ft, q_p, k_s, v_s, self.cfg, timestep)
        if self.record_entropy:
            from ..attention import blend_queries
            import math as _m

            lam = self.cfg.lambda_for(timestep)
            blended = blend_queries(q_ft, q_p, self.cfg.beta)
            w = attention_weights(
                blended.data, k_s.data, lam / _m.sqrt(blended.dim)
            )
            self.entropies.setdefault(layer_id, []).append(
                float(row_entropies(w).mean())
            )
        return fused.data

    def observe(self, layer_id, timestep, q, k, v, out):
        return None


class _ActivationTap:
    """Records every layer output; used to check fusion stays local."""

    def __init__(self):
        self.outputs: dict[BankKey, torch.Tensor] = {}

    def replace(self, layer_id, timestep, q, k, v):
        return None

    def observe(self, layer_id, timestep, q, k, v, out):
        self.outputs[(layer_id, timestep)] = out.detach().clone()


def ddpm_invert(
    image: np.ndarray,
    backend: BackendHandle,
    steps: int,
    source: str = "content",
) -> LatentTrajectory:
    """Deterministic noise-free inversion of one image.

    The single input is replicated across the six tile slots so the latent
    geometry matches what generation operates on; conditioning tokens come
    from the image itself.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    image = np.asarray(image)
    r = backend.view_resolution
    if image.shape != (r, r, 3):
        raise ValueError(
            f"expected a preprocessed {r}x{r} RGB image, got shape {image.shape}"
        )
    schedule = backend.make_schedule(steps)
    tile = tile_views([image] * 6)
    x0 = backend.encode_image(tile)
    cond = backend.cond_tokens(image)
    latents = backend.run_invert(x0, schedule, cond)
    return LatentTrajectory(
        latents=latents, schedule=schedule, conditioning=cond, source=source
    )


def capture_features(
    trajectory: LatentTrajectory,
    backend: BackendHandle,
    cfg: AttnConfig,
    role: str,
) -> FeatureBank:
    """Replay the sampler from the trajectory endpoint and record attention
    features at the configured layers.

    role selects what is recorded: "style" stores key/value pairs, for any
    source image; "content" stores the queries later blended in as the
    structure anchor. One entry exists per (target layer, active step).
    """
    if role not in ("style", "content"):
        raise ValueError(f"capture role must be style or content, got {role!r}")
    layers = select_target_layers(backend.layer_names, cfg.target_layers)
    tap = _CaptureTap(set(layers), cfg, role)
    sched = trajectory.schedule
    backend.run_denoise(trajectory.latents[-1], sched, trajectory.conditioning, tap=tap)
    return FeatureBank(
        kv=tap.kv,
        preserve=tap.preserve,
        provenance={
            f"{role}_source": trajectory.source,
            "role": role,
            "layers": list(layers),
        },
        steps=sched.steps,
    )


def generate_multiview(
    content: np.ndarray,
    bank: FeatureBank,
    backend: BackendHandle,
    cfg: AttnConfig,
    seed: int,
    trajectory: Optional[LatentTrajectory] = None,
    record_entropy: bool = False,
) -> ViewGrid:
    """Sample the six stylized views.

    Sampling starts from the content image's inversion endpoint and runs
    the usual loop, except that each (target layer, active step) computes
    fused attention against the bank instead of its native attention. The
    bank must cover exactly those pairs; nothing falls back silently.

    The seed is threaded to any stochastic scheduler component and stamped
    on the result; the default scheduler is noise-free, so the images are a
    pure function of (content, bank, cfg).
    """
    if bank.steps is None:
        raise ValueError("feature bank carries no step count")
    if trajectory is None:
        trajectory = ddpm_invert(content, backend, bank.steps, source="content")
    elif trajectory.steps != bank.steps:
        raise ValueError(
            f"trajectory was inverted over {trajectory.steps} steps but the "
            f"bank holds {bank.steps}"
        )
    layers = select_target_layers(backend.layer_names, cfg.target_layers)
    use_preserve = cfg.beta[1] > 0.0
    bank.require_complete(layers, cfg, need_preserve=use_preserve)
    tap = _FusionTap(bank, set(layers), cfg, use_preserve, record_entropy)
    _ = torch.Generator().manual_seed(seed)  # reserved for stochastic schedulers
    x0 = backend.run_denoise(
        trajectory.latents[-1], trajectory.schedule, trajectory.conditioning, tap=tap
    )
    tile = to_uint8(backend.decode_latent(x0))
    grid = ViewGrid.from_tile(tile, backend.six_poses(), seed)
    if record_entropy:
        object.__setattr__(grid, "_entropies", dict(tap.entropies))
    return grid


def generate_native(
    content: np.ndarray,
    backend: BackendHandle,
    steps: int,
    seed: int,
    trajectory: Optional[LatentTrajectory] = None,
) -> ViewGrid:
    """The unmodified sampler: same flow as generate_multiview with no
    attention swapped. Baseline for fusion-off comparisons."""
    if trajectory is None:
        trajectory = ddpm_invert(content, backend, steps, source="content")
    x0 = backend.run_denoise(
        trajectory.latents[-1], trajectory.schedule, trajectory.conditioning, tap=None
    )
    tile = to_uint8(backend.decode_latent(x0))
    return ViewGrid.from_tile(tile, backend.six_poses(), seed)
