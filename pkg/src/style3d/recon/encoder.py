"""Patch tokenizer for posed views, with camera-modulated normalization.

Each view is patchified independently and its tokens are scaled/shifted by
parameters predicted from the camera pose (adaptive layer norm). The
modulation branch ends in a zero-initialized linear layer, so a fresh
encoder (or zeroed modulation weights) reproduces the unmodulated path
exactly. Transformer blocks attend within a view only, which makes the
token stream equivariant to view reordering.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from ..cameras import Camera
from .data import PosedViewBatch

POSE_FEATURES = 6


def pose_features(cam: Camera, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    az = math.radians(cam.azimuth_deg)
    el = math.radians(cam.elevation_deg)
    f = [
        math.cos(az),
        math.sin(az),
        math.cos(el),
        math.sin(el),
        cam.radius / (1.0 + cam.radius),
        math.radians(cam.fov_deg),
    ]
    return torch.tensor(f, dtype=dtype)


class _Block(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.SiLU(), nn.Linear(4 * d, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        a, _ = self.attn(h, h, h, need_weights=False)
        x = x + a
        return x + self.mlp(self.norm2(x))


class ViewEncoder(nn.Module):
    def __init__(
        self,
        image_size: int,
        patch_size: int,
        d_model: int = 64,
        n_blocks: int = 2,
        n_heads: int = 4,
    ):
        super().__init__()
        if image_size % patch_size != 0:
            raise ValueError(
                f"image size {image_size} is not divisible by patch size {patch_size}"
            )
        self.image_size = image_size
        self.patch_size = patch_size
        self.d_model = d_model
        side = image_size // patch_size
        self.tokens_per_view = side * side
        self.patch = nn.Conv2d(3, d_model, patch_size, stride=patch_size)
        self.pos_emb = nn.Parameter(torch.zeros(self.tokens_per_view, d_model))
        self.pose_mlp = nn.Sequential(
            nn.Linear(POSE_FEATURES, d_model),
            nn.SiLU(),
            nn.Linear(d_model, 2 * d_model),
        )
        # identity modulation at init: zero scale and shift for every pose
        nn.init.zeros_(self.pose_mlp[-1].weight)
        nn.init.zeros_(self.pose_mlp[-1].bias)
        self.blocks = nn.ModuleList(_Block(d_model, n_heads) for _ in range(n_blocks))

    def forward(self, batch: PosedViewBatch) -> torch.Tensor:
        """Tokens for the whole batch, shape (N * tokens_per_view, d)."""
        imgs = batch.images
        n, h, w, _ = imgs.shape
        if h != self.image_size or w != self.image_size:
            raise ValueError(
                f"encoder was built for {self.image_size}px views, got {w}x{h}"
            )
        x = imgs.permute(0, 3, 1, 2)
        x = self.patch(x)  # (N, d, side, side)
        x = x.flatten(2).transpose(1, 2)  # (N, P, d)
        x = x + self.pos_emb
        poses = torch.stack(
            [pose_features(c, dtype=x.dtype) for c in batch.cameras]
        )
        mod = self.pose_mlp(poses)  # (N, 2d)
        scale, shift = mod.chunk(2, dim=-1)
        x = x * (1.0 + scale[:, None, :]) + shift[:, None, :]
        for blk in self.blocks:
            x = blk(x)
        return x.reshape(n * self.tokens_per_view, self.d_model)
