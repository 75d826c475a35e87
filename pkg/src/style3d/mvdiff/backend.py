"""Diffusion backends.

A backend bundles the pieces the stylization pipeline needs from a
multi-view diffusion model: latent encode/decode, a conditioning stream,
a noise-prediction network with named attention layers, the fixed six-view
camera convention, and the noise schedule. Two kinds exist: a small
self-contained "toy" network used by the test suite, and an adapter for
pretrained multi-view weights (see pretrained.py).

Attention taps: every attention layer consults an optional tap object
during the forward pass. `replace` may return a substitute output for the
layer (this is how fused stylization is injected); `observe` sees the
projected q/k/v and the final output (this is how feature banks and
diagnostics are captured). Tap state lives with the caller; backend
handles themselves are stateless between calls but must not be shared
across threads while a pass is running.
"""

from __future__ import annotations

import math
from typing import Optional, Protocol, Sequence

import numpy as np
import torch

from ..attention import _scaled_attention
from ..cameras import Camera
from ..errors import BackendError
from ..imgio import to_float
from .scheduler import DiffusionSchedule, ddim_step, make_schedule

TILE_ROWS = 3
TILE_COLS = 2

# Fixed six-view orbit: azimuth sweeps the circle, elevation alternates
# above and below the equator.
SIX_VIEW_AZIMUTHS = (30.0, 90.0, 150.0, 210.0, 270.0, 330.0)
SIX_VIEW_ELEVATIONS = (20.0, -10.0, 20.0, -10.0, 20.0, -10.0)
SIX_VIEW_RADIUS = 2.5
SIX_VIEW_FOV = 30.0

# The toy network mirrors the tail of the real backbone: the five standard
# injection sites plus two earlier attention layers that are never fused.
TOY_LAYER_NAMES = (
    "up_blocks.2.attentions.2.transformer_blocks.0.attn1",
    "up_blocks.3.attentions.0.transformer_blocks.0.attn1",
    "up_blocks.3.attentions.0.transformer_blocks.0.attn2",
    "up_blocks.3.attentions.1.transformer_blocks.0.attn1",
    "up_blocks.3.attentions.1.transformer_blocks.0.attn2",
    "up_blocks.3.attentions.2.transformer_blocks.0.attn1",
    "up_blocks.3.attentions.2.transformer_blocks.0.attn2",
)


class AttentionTap(Protocol):
    def replace(
        self,
        layer_id: str,
        timestep: int,
        q: torch.Tensor,
        k: torch.Tensor,
        v: torch.Tensor,
    ) -> Optional[torch.Tensor]:
        """Return a substitute attention output for this layer, or None to
        keep the native one."""

    def observe(
        self,
        layer_id: str,
        timestep: int,
        q: torch.Tensor,
        k: torch.Tensor,
        v: torch.Tensor,
        out: torch.Tensor,
    ) -> None:
        """Called after the layer output (native or substituted) is fixed."""


class BackendHandle:
    """Common interface of toy and pretrained backends."""

    kind: str = "abstract"
    weight_source: str = ""
    view_resolution: int = 0
    layer_names: tuple[str, ...] = ()

    def six_poses(self) -> tuple[Camera, ...]:
        return tuple(
            Camera(
                elevation_deg=SIX_VIEW_ELEVATIONS[i],
                azimuth_deg=SIX_VIEW_AZIMUTHS[i],
                radius=SIX_VIEW_RADIUS,
                fov_deg=SIX_VIEW_FOV,
                width=self.view_resolution,
                height=self.view_resolution,
            )
            for i in range(6)
        )

    def make_schedule(self, steps: int) -> DiffusionSchedule:
        return make_schedule(steps)

    @property
    def tile_resolution(self) -> tuple[int, int]:
        return (TILE_ROWS * self.view_resolution, TILE_COLS * self.view_resolution)

    def encode_image(self, img: np.ndarray) -> torch.Tensor:
        raise NotImplementedError

    def decode_latent(self, latent: torch.Tensor) -> np.ndarray:
        raise NotImplementedError

    def cond_tokens(self, img: np.ndarray) -> torch.Tensor:
        raise NotImplementedError

    def predict_noise(
        self,
        latent: torch.Tensor,
        t_index: int,
        cond: torch.Tensor,
        tap: Optional[AttentionTap] = None,
        schedule: Optional[DiffusionSchedule] = None,
    ) -> torch.Tensor:
        raise NotImplementedError

    def run_invert(
        self, x0: torch.Tensor, schedule: DiffusionSchedule, cond: torch.Tensor
    ) -> torch.Tensor:
        """Walk a clean latent up the noise schedule; returns the stacked
        trajectory of schedule.steps + 1 latents, clean first."""
        ab = schedule.alphas_cumprod
        out = [x0]
        x = x0
        for i in range(schedule.steps):
            eps = self.predict_noise(x, i, cond, tap=None, schedule=schedule)
            x = ddim_step(x, eps, float(ab[i]), float(ab[i + 1]))
            out.append(x)
        return torch.stack(out, dim=0)

    def run_denoise(
        self,
        x_top: torch.Tensor,
        schedule: DiffusionSchedule,
        cond: torch.Tensor,
        tap: Optional[AttentionTap] = None,
    ) -> torch.Tensor:
        """Walk the noisiest latent back down to a clean one, consulting the
        tap at every attention layer along the way."""
        ab = schedule.alphas_cumprod
        x = x_top
        for i in range(schedule.steps, 0, -1):
            eps = self.predict_noise(x, i, cond, tap=tap, schedule=schedule)
            x = ddim_step(x, eps, float(ab[i]), float(ab[i - 1]))
        return x


def _randn(gen: torch.Generator, *shape: int, scale: float = 1.0) -> torch.Tensor:
    return torch.randn(*shape, generator=gen, dtype=torch.float32) * scale


def _sinusoidal(t: float, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half, 1)
    )
    ang = t * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)])


class ToyBackend(BackendHandle):
    """Small deterministic stand-in for the pretrained multi-view model.

    Latents are orthogonal color projections of a pooled tile; the noise
    network is a stack of named single-head attention layers over the
    latent tokens, cross-attending to a conditioning image where the real
    backbone would. Weights are frozen at construction from the given seed,
    so every pass is a pure function of its inputs.
    """

    kind = "toy"

    def __init__(
        self,
        view_resolution: int = 32,
        latent_channels: int = 8,
        token_dim: int = 16,
        seed: int = 0,
        noise_net: str = "attention",
        downsample: int = 4,
    ):
        if view_resolution % downsample != 0:
            raise BackendError(
                f"view resolution {view_resolution} not divisible by the "
                f"latent downsample factor {downsample}"
            )
        if noise_net not in ("attention", "zero"):
            raise BackendError(f"unknown toy noise net {noise_net!r}")
        self.view_resolution = view_resolution
        self.latent_channels = latent_channels
        self.token_dim = token_dim
        self.downsample = downsample
        self.noise_net = noise_net
        self.seed = seed
        self.weight_source = f"builtin:toy-{noise_net}-seed{seed}"
        self.layer_names = TOY_LAYER_NAMES

        th, tw = self.tile_resolution
        self.latent_hw = (th // downsample, tw // downsample)
        n_tokens = self.latent_hw[0] * self.latent_hw[1]
        cres = view_resolution // downsample
        n_cond = cres * cres

        gen = torch.Generator().manual_seed(seed)
        # Column-orthonormal color basis makes decode the exact left inverse
        # of encode (up to pooling), which keeps toy artifacts image-like.
        basis = _randn(gen, latent_channels, 3)
        q, _ = torch.linalg.qr(basis)
        self.color_basis = q.contiguous()

        d = token_dim
        c = latent_channels
        self.in_proj = _randn(gen, c, d, scale=1.0 / math.sqrt(c))
        self.cond_proj = _randn(gen, c, d, scale=1.0 / math.sqrt(c))
        self.pos_emb = _randn(gen, n_tokens, d, scale=0.3)
        self.cond_pos_emb = _randn(gen, n_cond, d, scale=0.3)
        self.layers = {}
        for name in TOY_LAYER_NAMES:
            s = 1.0 / math.sqrt(d)
            self.layers[name] = {
                "wq": _randn(gen, d, d, scale=s),
                "wk": _randn(gen, d, d, scale=s),
                "wv": _randn(gen, d, d, scale=s),
                "wo": _randn(gen, d, d, scale=0.5 * s),
                "w1": _randn(gen, d, 2 * d, scale=s),
                "w2": _randn(gen, 2 * d, d, scale=0.5 / math.sqrt(2 * d)),
            }
        self.out_proj = _randn(gen, d, c, scale=0.1 / math.sqrt(d))

    # -- latent codec ------------------------------------------------------

    def encode_image(self, img: np.ndarray) -> torch.Tensor:
        img = to_float(np.asarray(img))
        th, tw = self.tile_resolution
        if img.shape != (th, tw, 3):
            raise ValueError(
                f"backend expects a {th}x{tw} RGB tile, got {img.shape}"
            )
        x = torch.from_numpy(img.astype(np.float32)).permute(2, 0, 1) * 2.0 - 1.0
        pooled = torch.nn.functional.avg_pool2d(
            x.unsqueeze(0), self.downsample
        ).squeeze(0)
        return torch.einsum("cd,dhw->chw", self.color_basis, pooled).contiguous()

    def decode_latent(self, latent: torch.Tensor) -> np.ndarray:
        c, h, w = latent.shape
        rgb = torch.einsum("cd,chw->dhw", self.color_basis, latent)
        rgb = torch.nn.functional.interpolate(
            rgb.unsqueeze(0), scale_factor=self.downsample, mode="nearest"
        ).squeeze(0)
        rgb = (rgb + 1.0) * 0.5
        return rgb.clamp(0.0, 1.0).permute(1, 2, 0).numpy()

    def _encode_single(self, img: np.ndarray) -> torch.Tensor:
        img = to_float(np.asarray(img))
        r = self.view_resolution
        if img.shape != (r, r, 3):
            raise ValueError(f"backend expects a {r}x{r} RGB image, got {img.shape}")
        x = torch.from_numpy(img.astype(np.float32)).permute(2, 0, 1) * 2.0 - 1.0
        pooled = torch.nn.functional.avg_pool2d(
            x.unsqueeze(0), self.downsample
        ).squeeze(0)
        return torch.einsum("cd,dhw->chw", self.color_basis, pooled)

    def cond_tokens(self, img: np.ndarray) -> torch.Tensor:
        lat = self._encode_single(img)
        toks = lat.reshape(self.latent_channels, -1).T
        return toks @ self.cond_proj + self.cond_pos_emb

    # -- noise network -----------------------------------------------------

    def predict_noise(
        self,
        latent: torch.Tensor,
        t_index: int,
        cond: torch.Tensor,
        tap: Optional[AttentionTap] = None,
        schedule: Optional[DiffusionSchedule] = None,
    ) -> torch.Tensor:
        if self.noise_net == "zero":
            return torch.zeros_like(latent)
        c, lh, lw = latent.shape
        d = self.token_dim
        h = latent.reshape(c, -1).T @ self.in_proj
        h = h + self.pos_emb + _sinusoidal(float(t_index), d)
        scale = 1.0 / math.sqrt(d)
        for name in self.layer_names:
            w = self.layers[name]
            src = h if name.endswith("attn1") else cond
            q = h @ w["wq"]
            k = src @ w["wk"]
            v = src @ w["wv"]
            out = None
            if tap is not None:
                out = tap.replace(name, t_index, q, k, v)
            if out is None:
                out = _scaled_attention(q, k, v, scale)
            if tap is not None:
                tap.observe(name, t_index, q, k, v, out)
            h = h + out @ w["wo"]
            h = h + torch.nn.functional.silu(h @ w["w1"]) @ w["w2"]
        eps = h @ self.out_proj
        return eps.T.reshape(c, lh, lw)


def load_backend(kind: str, **options) -> BackendHandle:
    """Construct a backend by kind ("toy" or "pretrained")."""
    if kind == "toy":
        return ToyBackend(**options)
    if kind == "pretrained":
        from .pretrained import PretrainedBackend

        return PretrainedBackend(**options)
    raise BackendError(f"unknown backend kind {kind!r} (expected toy or pretrained)")
