"""Fused cross-image attention.

The stylization pass swaps the key/value streams of selected attention
layers for ones captured from a style image, while the query stream stays
anchored to the content being generated.  The fused operator is

    out = softmax(lam * (beta_c * Q + beta_p * Q_p) @ K_s^T / sqrt(d)) @ V_s

where ``Q`` is the live query of the generation pass, ``Q_p`` a preserved
query captured from the unstylized content pass, and ``(K_s, V_s)`` the
style bank entries for the same layer and timestep.  With ``beta=(1, 0)``
and ``lam=1`` the operator collapses to plain attention over the bank.

Everything here is a pure function of its inputs; hook state lives with the
backend, not in this module.
"""

from __future__ import annotations

import fnmatch
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import torch

__all__ = [
    "DEFAULT_TARGET_LAYERS",
    "FeatureKind",
    "FeatureTensor",
    "AttnConfig",
    "blend_queries",
    "standard_attention",
    "fuse_attention",
    "attention_weights",
    "row_entropies",
    "select_target_layers",
]

# Default injection sites: the last three up-block attention modules of the
# backbone, self- and cross-attention alike (the first carries no attn1).
DEFAULT_TARGET_LAYERS: tuple[str, ...] = (
    "up_blocks.3.attentions.0.transformer_blocks.0.attn2",
    "up_blocks.3.attentions.1.transformer_blocks.0.attn1",
    "up_blocks.3.attentions.1.transformer_blocks.0.attn2",
    "up_blocks.3.attentions.2.transformer_blocks.0.attn1",
    "up_blocks.3.attentions.2.transformer_blocks.0.attn2",
)

_ALLOWED_DTYPES = (torch.float32, torch.float64)


class FeatureKind(str, Enum):
    QUERY = "query"
    QUERY_PRESERVE = "query_preserve"
    KEY = "key"
    VALUE = "value"


@dataclass(frozen=True)
class FeatureTensor:
    """A single captured attention feature: 2-D ``(tokens, dim)`` data plus
    the layer and timestep it came from."""

    data: torch.Tensor
    layer_id: str
    timestep: int
    kind: FeatureKind

    def __post_init__(self) -> None:
        if not isinstance(self.data, torch.Tensor):
            raise ValueError("FeatureTensor.data must be a torch.Tensor")
        if self.data.ndim != 2:
            raise ValueError(
                f"feature for layer {self.layer_id!r} must be 2-D (tokens, dim), "
                f"got shape {tuple(self.data.shape)}"
            )
        if self.data.shape[0] <= 0 or self.data.shape[1] <= 0:
            raise ValueError("feature dimensions must be positive")
        if self.data.dtype not in _ALLOWED_DTYPES:
            raise ValueError(
                f"feature dtype must be float32 or float64, got {self.data.dtype}"
            )
        if not bool(torch.isfinite(self.data).all()):
            raise ValueError(
                f"non-finite values in {self.kind.value} feature for layer "
                f"{self.layer_id!r} at timestep {self.timestep}"
            )

    @property
    def tokens(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])


@dataclass(frozen=True)
class AttnConfig:
    """Fusion settings.

    beta:             (content, preserve) query mixing pair, must sum to 1.
    lambda_scale:     sharpening factor applied to the attention logits.
    target_layers:    layer names or fnmatch globs to hook.
    active_timesteps: inclusive (lo, hi) denoising-step interval where the
                      hook fires; hi=None means every step.
    lambda_schedule:  optional per-timestep override for lambda_scale.
    """

    beta: tuple[float, float] = (0.4, 0.6)
    lambda_scale: float = 1.5
    target_layers: tuple[str, ...] = DEFAULT_TARGET_LAYERS
    active_timesteps: tuple[int, Optional[int]] = (1, None)
    lambda_schedule: Optional[Callable[[int], float]] = field(
        default=None, compare=False
    )

    def __post_init__(self) -> None:
        bc, bp = float(self.beta[0]), float(self.beta[1])
        if not (math.isfinite(bc) and math.isfinite(bp)):
            raise ValueError("beta entries must be finite")
        if bc < 0.0 or bp < 0.0:
            raise ValueError(f"beta entries must be non-negative, got ({bc}, {bp})")
        if abs(bc + bp - 1.0) > 1e-9:
            raise ValueError(f"beta must sum to 1, got {bc} + {bp} = {bc + bp}")
        if not (math.isfinite(self.lambda_scale) and self.lambda_scale > 0.0):
            raise ValueError(f"lambda_scale must be > 0, got {self.lambda_scale}")
        lo, hi = self.active_timesteps
        if lo < 0 or (hi is not None and hi < lo):
            raise ValueError(f"bad active_timesteps interval {self.active_timesteps}")
        if len(self.target_layers) == 0:
            raise ValueError("target_layers must not be empty")

    def lambda_for(self, timestep: int) -> float:
        """Effective lambda at a denoising step (constant unless a schedule
        hook was supplied)."""
        if self.lambda_schedule is None:
            return float(self.lambda_scale)
        lam = float(self.lambda_schedule(timestep))
        if not (math.isfinite(lam) and lam > 0.0):
            raise ValueError(f"lambda_schedule({timestep}) returned {lam}")
        return lam

    def step_active(self, timestep: int) -> bool:
        lo, hi = self.active_timesteps
        return timestep >= lo and (hi is None or timestep <= hi)


def _check_pair(a: FeatureTensor, b: FeatureTensor, what: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"{what}: shape mismatch {tuple(a.data.shape)} vs {tuple(b.data.shape)}"
        )


def blend_queries(
    q_c: FeatureTensor, q_c_p: FeatureTensor, beta: tuple[float, float]
) -> FeatureTensor:
    """Convex mix of the live query with the preserved content query.

    Endpoints are returned untouched so that beta=(1,0) is bit-identical to
    the live query (and (0,1) to the preserved one) rather than merely close.
    """
    bc, bp = float(beta[0]), float(beta[1])
    if abs(bc + bp - 1.0) > 1e-9 or bc < 0.0 or bp < 0.0:
        raise ValueError(f"beta must be a non-negative pair summing to 1, got {beta}")
    _check_pair(q_c, q_c_p, "blend_queries")
    if bp == 0.0:
        return q_c
    if bc == 0.0:
        return FeatureTensor(q_c_p.data, q_c.layer_id, q_c.timestep, FeatureKind.QUERY)
    mixed = bc * q_c.data + bp * q_c_p.data
    return FeatureTensor(mixed, q_c.layer_id, q_c.timestep, FeatureKind.QUERY)


def _scaled_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, scale: float
) -> torch.Tensor:
    # One shared kernel so the fused path at lam=1, beta=(1,0) runs the exact
    # instruction sequence of the plain path.
    logits = (q @ k.transpose(0, 1)) * scale
    logits = logits - logits.max(dim=-1, keepdim=True).values
    w = torch.exp(logits)
    w = w / w.sum(dim=-1, keepdim=True)
    return w @ v


def attention_weights(
    q: torch.Tensor, k: torch.Tensor, scale: float
) -> torch.Tensor:
    """Row-stochastic attention matrix for diagnostics and tests."""
    logits = (q @ k.transpose(0, 1)) * scale
    logits = logits - logits.max(dim=-1, keepdim=True).values
    w = torch.exp(logits)
    return w / w.sum(dim=-1, keepdim=True)


def row_entropies(weights: torch.Tensor) -> torch.Tensor:
    """Shannon entropy (nats) of each attention row."""
    p = weights.clamp_min(1e-30)
    return -(p * p.log()).sum(dim=-1)


def standard_attention(
    q: FeatureTensor, k: FeatureTensor, v: FeatureTensor
) -> FeatureTensor:
    """Plain scaled dot-product attention over a single head."""
    if q.dim != k.dim:
        raise ValueError(f"query dim {q.dim} does not match key dim {k.dim}")
    if k.tokens != v.tokens:
        raise ValueError(f"key tokens {k.tokens} do not match value tokens {v.tokens}")
    out = _scaled_attention(q.data, k.data, v.data, 1.0 / math.sqrt(q.dim))
    return FeatureTensor(out, q.layer_id, q.timestep, FeatureKind.VALUE)


def fuse_attention(
    q_c: FeatureTensor,
    q_c_p: FeatureTensor,
    k_s: FeatureTensor,
    v_s: FeatureTensor,
    cfg: AttnConfig,
    timestep: int,
) -> FeatureTensor:
    """Attention of the blended content query against style keys/values.

    Args:
        q_c:      live query of the generation pass, (n, d).
        q_c_p:    preserved query from the content pass, (n, d).
        k_s:      style keys, (m, d).
        v_s:      style values, (m, dv).
        cfg:      mixing pair, lambda and layer/timestep settings.
        timestep: denoising step, consulted for the lambda schedule.

    Returns:
        (n, dv) fused feature carrying q_c's layer id and timestep.
    """
    blended = blend_queries(q_c, q_c_p, cfg.beta)
    if blended.dim != k_s.dim:
        raise ValueError(
            f"query dim {blended.dim} does not match style key dim {k_s.dim}"
        )
    if k_s.tokens != v_s.tokens:
        raise ValueError(
            f"style key tokens {k_s.tokens} do not match value tokens {v_s.tokens}"
        )
    lam = cfg.lambda_for(timestep)
    out = _scaled_attention(
        blended.data, k_s.data, v_s.data, lam / math.sqrt(blended.dim)
    )
    return FeatureTensor(out, q_c.layer_id, q_c.timestep, FeatureKind.VALUE)


def select_target_layers(
    available: Sequence[str], patterns: Sequence[str]
) -> list[str]:
    """Resolve configured layer names (exact or fnmatch globs) against a
    backbone's registry, preserving registry order.

    Raises ValueError naming every pattern that matched nothing.
    """
    available = list(available)
    chosen: set[str] = set()
    missing: list[str] = []
    for pat in patterns:
        if pat in available:
            chosen.add(pat)
            continue
        hits = fnmatch.filter(available, pat)
        if hits:
            chosen.update(hits)
        else:
            missing.append(pat)
    if missing:
        raise ValueError(
            "target layers not present in backbone: " + ", ".join(sorted(missing))
        )
    return [name for name in available if name in chosen]
