"""Triplane representation, field heads and the reconstruction model.

A triplane holds three feature images, one per coordinate plane (x-y, x-z,
y-z). A 3-D point samples each plane bilinearly at its projection and the
three features are concatenated; small MLP heads turn that vector into the
signed distance, color, a per-vertex deformation and an extraction weight.

The signed distance starts as a centered sphere: the last layer of the SDF
head is zero-initialized and an analytic sphere offset is added, so a
fresh model's zero level set sits at the configured radius regardless of
the other weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
from torch import nn

from .data import PosedViewBatch
from .encoder import ViewEncoder

# plane p covers world axes PLANE_AXES[p]; the first axis runs along the
# plane's width (index j), the second along its height (index i)
PLANE_AXES = ((0, 1), (0, 2), (1, 2))

SIGN_CONVENTIONS = ("positive_inside", "negative_inside")


@dataclass(frozen=True)
class Triplane:
    """planes: (3, C, R, R) features over the bbox cube; aggregation is how
    per-plane samples combine (concatenation is the only mode)."""

    planes: torch.Tensor
    bbox: tuple[float, float] = (-1.0, 1.0)
    aggregation: str = "concat"

    def __post_init__(self) -> None:
        if self.planes.ndim != 4 or self.planes.shape[0] != 3:
            raise ValueError(
                f"planes must be (3, C, R, R), got {tuple(self.planes.shape)}"
            )
        if self.planes.shape[2] != self.planes.shape[3] or self.planes.shape[2] < 2:
            raise ValueError("plane resolution must be square and at least 2")
        if self.aggregation != "concat":
            raise ValueError(f"unsupported aggregation {self.aggregation!r}")
        if self.bbox[1] <= self.bbox[0]:
            raise ValueError(f"empty bbox {self.bbox}")
        if not bool(torch.isfinite(self.planes).all()):
            raise ValueError("non-finite triplane features")

    @property
    def channels(self) -> int:
        return int(self.planes.shape[1])

    @property
    def resolution(self) -> int:
        return int(self.planes.shape[2])


def _bilinear(plane: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Sample (C, R, R) at continuous pixel coords (u along width j,
    v along height i), align-corners convention."""
    r = plane.shape[-1]
    u = u.clamp(0.0, float(r - 1))
    v = v.clamp(0.0, float(r - 1))
    j0 = u.floor().long().clamp(0, r - 2)
    i0 = v.floor().long().clamp(0, r - 2)
    fu = (u - j0.to(u.dtype)).unsqueeze(-1)
    fv = (v - i0.to(v.dtype)).unsqueeze(-1)
    p00 = plane[:, i0, j0].T
    p01 = plane[:, i0, j0 + 1].T
    p10 = plane[:, i0 + 1, j0].T
    p11 = plane[:, i0 + 1, j0 + 1].T
    top = p00 * (1 - fu) + p01 * fu
    bot = p10 * (1 - fu) + p11 * fu
    return top * (1 - fv) + bot * fv


def sample_triplane(tp: Triplane, points: torch.Tensor) -> torch.Tensor:
    """Concatenated per-plane features for points inside the bbox.

    Args:
        tp: the triplane.
        points: (M, 3) world coordinates.

    Returns:
        (M, 3 * C) features.

    Raises:
        ValueError: if any point leaves the bbox (no extrapolation).
    """
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be (M, 3), got {tuple(points.shape)}")
    lo, hi = tp.bbox
    eps = 1e-6 * (hi - lo)
    flat = points.detach()
    if points.numel() and (
        float(flat.min()) < lo - eps or float(flat.max()) > hi + eps
    ):
        raise ValueError("point outside the triplane bbox; extrapolation is not defined")
    r = tp.resolution
    scale = (r - 1) / (hi - lo)
    feats = []
    for p, (a, b) in enumerate(PLANE_AXES):
        u = (points[:, a] - lo) * scale
        v = (points[:, b] - lo) * scale
        feats.append(_bilinear(tp.planes[p], u, v))
    return torch.cat(feats, dim=-1)


@dataclass
class FieldSample:
    """Per-point field outputs. Deformations are already clamped to half a
    grid cell of the extraction grid they are meant for."""

    sdf: torch.Tensor  # (M,)
    color: torch.Tensor  # (M, 3) in [0, 1]
    deformation: torch.Tensor  # (M, 3)
    weight: torch.Tensor  # (M,)
    half_cell: float

    def __post_init__(self) -> None:
        m = self.sdf.shape[0]
        if self.color.shape != (m, 3) or self.deformation.shape != (m, 3):
            raise ValueError("field sample arrays disagree on point count")
        if self.weight.shape != (m,):
            raise ValueError("field sample arrays disagree on point count")
        for t in (self.sdf, self.color, self.deformation, self.weight):
            if not bool(torch.isfinite(t).all()):
                raise ValueError("non-finite values in field sample")
        if m:
            c = self.color.detach()
            if float(c.min()) < 0.0 or float(c.max()) > 1.0:
                raise ValueError("colors must lie in [0, 1]")
            if float(self.deformation.detach().abs().max()) > self.half_cell + 1e-6:
                raise ValueError("deformation exceeds half a grid cell")


class TriplaneDecoder(nn.Module):
    """Learned plane queries cross-attending once over the view tokens.

    Output layout: token p * R * R + i * R + j becomes planes[p, :, i, j].
    Attention over the full token sequence makes the planes invariant to
    view reordering. Single head, so a scripted forward is easy to check.
    """

    def __init__(self, d_model: int, plane_res: int, plane_channels: int):
        super().__init__()
        self.plane_res = plane_res
        self.plane_channels = plane_channels
        self.queries = nn.Parameter(torch.zeros(3 * plane_res * plane_res, d_model))
        self.key = nn.Linear(d_model, d_model)
        self.value = nn.Linear(d_model, d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 2 * d_model), nn.SiLU(), nn.Linear(2 * d_model, d_model)
        )
        self.out = nn.Linear(d_model, plane_channels)

    def forward(self, tokens: torch.Tensor) -> Triplane:
        if tokens.ndim != 2 or tokens.shape[1] != self.queries.shape[1]:
            raise ValueError(
                f"tokens must be (T, {self.queries.shape[1]}), got {tuple(tokens.shape)}"
            )
        d = tokens.shape[1]
        k = self.key(tokens)
        v = self.value(tokens)
        logits = self.queries @ k.T / math.sqrt(d)
        att = torch.softmax(logits, dim=-1)
        h = self.queries + att @ v
        h = h + self.mlp(h)
        flat = self.out(h)  # (3RR, C)
        r = self.plane_res
        planes = flat.reshape(3, r, r, self.plane_channels).permute(0, 3, 1, 2)
        return Triplane(planes=planes.contiguous())


class FieldHeads(nn.Module):
    def __init__(
        self,
        in_features: int,
        hidden: int = 64,
        sphere_radius: float = 0.45,
        sign_convention: str = "positive_inside",
        sdf_residual_bound: float = 0.35,
    ):
        super().__init__()
        if sign_convention not in SIGN_CONVENTIONS:
            raise ValueError(f"unknown sign convention {sign_convention!r}")
        if sdf_residual_bound <= 0:
            raise ValueError("sdf_residual_bound must be positive")
        self.sphere_radius = sphere_radius
        self.sign_convention = sign_convention
        self.sdf_residual_bound = sdf_residual_bound
        # geometry and appearance run on separate branches so color
        # gradients cannot shake the level set during fitting
        self.trunk = nn.Sequential(
            nn.Linear(in_features, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU()
        )
        self.color_trunk = nn.Sequential(
            nn.Linear(in_features, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU()
        )
        self.sdf = nn.Linear(hidden, 1)
        self.color = nn.Linear(hidden, 3)
        self.deform = nn.Linear(hidden, 3)
        self.weight = nn.Linear(hidden, 1)
        # boundary starts at the configured sphere: zero the last SDF layer
        # and let the analytic offset in forward() carry the level set
        nn.init.zeros_(self.sdf.weight)
        nn.init.zeros_(self.sdf.bias)

    def forward(
        self, feats: torch.Tensor, points: torch.Tensor, half_cell: float
    ) -> FieldSample:
        h = self.trunk(feats)
        hc = self.color_trunk(feats)
        radial = self.sphere_radius - points.norm(dim=-1)
        if self.sign_convention == "negative_inside":
            radial = -radial
        # bounded residual around the sphere prior: with a relu density an
        # empty field is an absorbing zero-gradient state, so the learned
        # part may never push the whole surface out of existence
        b = self.sdf_residual_bound
        sdf = b * torch.tanh(self.sdf(h).squeeze(-1) / b) + radial
        color = torch.sigmoid(self.color(hc))
        deform = torch.tanh(self.deform(h)) * half_cell
        deform = deform.clamp(-half_cell, half_cell)
        weight = 1.0 + 0.99 * torch.tanh(self.weight(h).squeeze(-1))
        return FieldSample(
            sdf=sdf, color=color, deformation=deform, weight=weight, half_cell=half_cell
        )


@dataclass
class ReconConfig:
    image_size: int = 32
    patch_size: int = 8
    d_model: int = 64
    n_blocks: int = 1
    n_heads: int = 4
    plane_res: int = 16
    plane_channels: int = 8
    hidden: int = 64
    grid_res: int = 24
    sphere_radius: float = 0.45
    sign_convention: str = "positive_inside"
    sdf_residual_bound: float = 0.35
    seed: int = 0


def seed_parameters(module: nn.Module, seed: int, std: float = 0.02) -> None:
    """Deterministic re-initialization covering every parameter: matrices
    become seeded normals, norm scales become ones, everything 1-D else
    (biases, positional tables) becomes zeros. Construction-time values
    never survive, so two builds with equal seeds match bit for bit."""
    gen = torch.Generator().manual_seed(seed)
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if p.ndim > 1:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
            elif name.endswith(".weight") or name == "weight":
                p.fill_(1.0)  # norm scales
            else:
                p.zero_()


class TriField:
    """Callable field over one triplane: points -> sdf (positive inside),
    color, deformation, weight."""

    def __init__(self, tp: Triplane, heads: FieldHeads, half_cell: float):
        self.tp = tp
        self.heads = heads
        self.half_cell = half_cell

    def full(self, points: torch.Tensor) -> FieldSample:
        feats = sample_triplane(self.tp, points)
        if not bool(torch.isfinite(feats).all()):
            raise ValueError("non-finite triplane features at query points")
        sample = self.heads(feats, points, self.half_cell)
        if self.heads.sign_convention == "negative_inside":
            sample = FieldSample(
                sdf=-sample.sdf,
                color=sample.color,
                deformation=sample.deformation,
                weight=sample.weight,
                half_cell=sample.half_cell,
            )
        return sample

    def sdf_color(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        s = self.full(points)
        return s.sdf, s.color


class ReconstructionModel(nn.Module):
    """Feed-forward sparse-view reconstructor: posed views in, triplane out,
    with field heads shared across queries."""

    def __init__(self, cfg: ReconConfig = ReconConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = ViewEncoder(
            cfg.image_size, cfg.patch_size, cfg.d_model, cfg.n_blocks, cfg.n_heads
        )
        self.decoder = TriplaneDecoder(cfg.d_model, cfg.plane_res, cfg.plane_channels)
        self.heads = FieldHeads(
            3 * cfg.plane_channels,
            cfg.hidden,
            cfg.sphere_radius,
            cfg.sign_convention,
            cfg.sdf_residual_bound,
        )
        seed_parameters(self, cfg.seed)
        # seeding overwrote the structural zeros: restore the SDF output
        # layer (sphere init) and the pose modulation (identity at init)
        nn.init.zeros_(self.heads.sdf.weight)
        nn.init.zeros_(self.encoder.pose_mlp[-1].weight)
        with torch.no_grad():
            self.decoder.queries.mul_(0.5)

    @property
    def half_cell(self) -> float:
        return 1.0 / (self.cfg.grid_res - 1)  # half of a [-1,1] grid cell

    def encode_views(self, batch: PosedViewBatch) -> torch.Tensor:
        return self.encoder(batch)

    def make_triplane(self, batch: PosedViewBatch) -> Triplane:
        return self.decoder(self.encoder(batch))

    def field(self, tp: Triplane) -> TriField:
        return TriField(tp, self.heads, self.half_cell)

    def query_field(self, tp: Triplane, points: torch.Tensor) -> FieldSample:
        return self.field(tp).full(points)


class DirectTriplaneModel(nn.Module):
    """Per-object variant: the triplane itself is the parameter tensor.
    Used to fit a single scene directly, no encoder involved."""

    def __init__(self, cfg: ReconConfig = ReconConfig()):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        init = torch.randn(
            3, cfg.plane_channels, cfg.plane_res, cfg.plane_res, generator=gen
        ) * 0.05
        self.planes = nn.Parameter(init)
        self.heads = FieldHeads(
            3 * cfg.plane_channels,
            cfg.hidden,
            cfg.sphere_radius,
            cfg.sign_convention,
            cfg.sdf_residual_bound,
        )
        seed_parameters(self.heads, cfg.seed + 1)
        nn.init.zeros_(self.heads.sdf.weight)

    @property
    def half_cell(self) -> float:
        return 1.0 / (self.cfg.grid_res - 1)

    def make_triplane(self, batch: Optional[PosedViewBatch] = None) -> Triplane:
        return Triplane(planes=self.planes)

    def field(self, tp: Triplane) -> TriField:
        return TriField(tp, self.heads, self.half_cell)

    def query_field(self, tp: Triplane, points: torch.Tensor) -> FieldSample:
        return self.field(tp).full(points)
