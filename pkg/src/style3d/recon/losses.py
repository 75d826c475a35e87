"""Supervision losses for the two reconstruction stages.

Stage 1 scores rendered color against ground truth with a summed squared
image term, a perceptual feature distance and a mask term. Stage 2 keeps
those and adds mask-gated depth (L1) and normal (one minus cosine) terms
plus the extraction-grid regularizer. All terms are plain sums over
pixels and views, so a single-pixel perturbation of size d moves the
image term by exactly d^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import torch

STAGE1_WEIGHTS: dict[str, float] = {"lpips": 2.0, "mask": 1.0}
STAGE2_WEIGHTS: dict[str, float] = {
    "lpips": 2.0,
    "mask": 1.0,
    "depth": 0.5,
    "normal": 0.2,
    "reg": 0.01,
}


class FeatureDistance:
    """Perceptual distance with frozen random conv features.

    Pluggable: anything with __call__(a, b) -> scalar tensor that is zero
    for identical inputs can replace it. Weights are derived from the seed
    alone, so the distance is the same in every process.
    """

    def __init__(self, seed: int = 7, channels: tuple[int, int] = (8, 16)):
        gen = torch.Generator().manual_seed(seed)
        c1, c2 = channels
        self.k1 = torch.randn(c1, 3, 3, 3, generator=gen) / (3.0 * 3)
        self.k2 = torch.randn(c2, c1, 3, 3, generator=gen) / (c1 * 3)

    def features(self, img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = img.permute(2, 0, 1)[None]
        f1 = torch.nn.functional.silu(
            torch.nn.functional.conv2d(x, self.k1.to(x.dtype), padding=1)
        )
        f2 = torch.nn.functional.conv2d(f1, self.k2.to(x.dtype), padding=1)
        return f1, f2

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        fa1, fa2 = self.features(a)
        fb1, fb2 = self.features(b)
        return ((fa1 - fb1) ** 2).mean() + ((fa2 - fb2) ** 2).mean()


_default_distance: Optional[FeatureDistance] = None


def default_feature_distance() -> FeatureDistance:
    global _default_distance
    if _default_distance is None:
        _default_distance = FeatureDistance()
    return _default_distance


@dataclass
class LossReport:
    """Total plus the per-term breakdown and the weights that combined
    them. Terms stay tensors so training can backprop through total."""

    total: torch.Tensor
    terms: dict[str, torch.Tensor]
    weights: dict[str, float]

    def __post_init__(self) -> None:
        for name, t in self.terms.items():
            val = float(t.detach())
            if not val >= 0.0:
                raise ValueError(f"loss term {name!r} is negative or NaN: {val}")
        expect = 0.0
        for name, t in self.terms.items():
            expect += self.weights.get(name, 0.0) * float(t.detach())
        got = float(self.total.detach())
        if abs(got - expect) > 1e-6 * max(1.0, abs(got)):
            raise ValueError(
                f"loss total {got} does not equal the weighted term sum {expect}"
            )

    def detached(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "terms": {k: float(v.detach()) for k, v in self.terms.items()},
            "weights": dict(self.weights),
        }


def _need(pred: Mapping, gt: Mapping, key: str) -> tuple[torch.Tensor, torch.Tensor]:
    if key not in pred or key not in gt:
        raise ValueError(f"both prediction and target must provide {key!r}")
    p, g = pred[key], gt[key]
    if p.shape != g.shape:
        raise ValueError(
            f"{key} shape mismatch: {tuple(p.shape)} vs {tuple(g.shape)}"
        )
    if not bool(torch.isfinite(p).all()) or not bool(torch.isfinite(g).all()):
        raise ValueError(f"non-finite values in {key!r}")
    return p, g


def loss_stage1(
    pred: Mapping[str, torch.Tensor],
    gt: Mapping[str, torch.Tensor],
    weights: Optional[Mapping[str, float]] = None,
    perceptual=None,
) -> LossReport:
    """Color-stage loss: sum of squared pixel error, perceptual distance
    summed over views, and squared mask error."""
    w = dict(STAGE1_WEIGHTS)
    if weights:
        w.update({k: float(v) for k, v in weights.items()})
    w.setdefault("image", 1.0)
    dist = perceptual if perceptual is not None else default_feature_distance()

    rgb_p, rgb_g = _need(pred, gt, "rgb")
    mask_p, mask_g = _need(pred, gt, "mask")

    image = ((rgb_p - rgb_g) ** 2).sum()
    lpips = sum(dist(rgb_p[i], rgb_g[i]) for i in range(rgb_p.shape[0]))
    if not torch.is_tensor(lpips):
        lpips = torch.zeros((), dtype=rgb_p.dtype)
    mask = ((mask_p - mask_g) ** 2).sum()

    terms = {"image": image, "lpips": lpips, "mask": mask}
    total = w["image"] * image + w["lpips"] * lpips + w["mask"] * mask
    return LossReport(total=total, terms=terms, weights={k: w[k] for k in ("image", "lpips", "mask")})


def loss_stage2(
    pred: Mapping[str, torch.Tensor],
    gt: Mapping[str, torch.Tensor],
    weights: Optional[Mapping[str, float]] = None,
    perceptual=None,
) -> LossReport:
    """Geometry-stage loss: the color-stage terms plus mask-gated depth and
    normal supervision and the extraction-grid regularizer (taken from
    pred["reg"] when present)."""
    w = dict(STAGE2_WEIGHTS)
    if weights:
        w.update({k: float(v) for k, v in weights.items()})
    w.setdefault("image", 1.0)

    base = loss_stage1(pred, gt, weights=w, perceptual=perceptual)

    depth_p, depth_g = _need(pred, gt, "depth")
    normal_p, normal_g = _need(pred, gt, "normal")
    if "mask" not in gt:
        raise ValueError("stage-2 loss needs the target mask for gating")
    gate = gt["mask"]

    depth = (gate * (depth_p - depth_g).abs()).sum()
    cosine = (normal_p * normal_g).sum(dim=-1)
    normal = (gate * (1.0 - cosine)).sum()
    reg = pred.get("reg")
    if reg is None:
        reg = torch.zeros((), dtype=depth.dtype)
    nval = float(normal.detach())
    if not math.isfinite(nval) or nval < -1e-6:
        raise ValueError("normal term out of range; are the normals unit length?")

    terms = dict(base.terms)
    terms.update({"depth": depth, "normal": normal.clamp_min(0.0), "reg": reg})
    total = (
        base.total
        + w["depth"] * depth
        + w["normal"] * terms["normal"]
        + w["reg"] * reg
    )
    wanted = {k: w[k] for k in ("image", "lpips", "mask", "depth", "normal", "reg")}
    return LossReport(total=total, terms=terms, weights=wanted)
