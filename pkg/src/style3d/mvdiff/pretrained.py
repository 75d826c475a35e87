"""Adapter for pretrained multi-view diffusion weights.

Loading needs the optional `pretrained` extra (diffusers + transformers)
and a local weight directory: pass weight_source explicitly or set the
STYLE3D_CACHE directory containing a `zero123plus` folder. Nothing is
downloaded. Every failure raises BackendError naming what was missing;
there is no silent fallback to the toy network.

The attention processors installed here reuse the exact fusion kernel the
toy backend uses. Multi-head layers are handled by slicing the projected
(tokens, heads*dim) features per head and fusing each slice, so banks keep
the 2-D per-layer layout the rest of the package expects.
"""

from __future__ import annotations

import math
import os
from typing import Optional

import numpy as np
import torch

from ..attention import _scaled_attention, DEFAULT_TARGET_LAYERS
from ..errors import BackendError
from ..imgio import to_float
from .backend import AttentionTap, BackendHandle
from .scheduler import DiffusionSchedule, make_schedule

CACHE_ENV = "STYLE3D_CACHE"
DEFAULT_SUBDIR = "zero123plus"


def resolve_weight_source(weight_source: Optional[str]) -> str:
    if weight_source:
        path = weight_source
    else:
        cache = os.environ.get(CACHE_ENV)
        if not cache:
            raise BackendError(
                "no pretrained weights configured: pass weight_source or set "
                f"{CACHE_ENV} to a cache directory holding '{DEFAULT_SUBDIR}'"
            )
        path = os.path.join(cache, DEFAULT_SUBDIR)
    if not os.path.isdir(path):
        raise BackendError(f"pretrained weight directory not found: {path}")
    return path


class _TapProcessor:
    """diffusers attention processor that routes q/k/v through a tap."""

    def __init__(self, owner: "PretrainedBackend", layer_id: str):
        self.owner = owner
        self.layer_id = layer_id

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, **kwargs):
        ctx = encoder_hidden_states if encoder_hidden_states is not None else hidden_states
        q = attn.to_q(hidden_states)
        k = attn.to_k(ctx)
        v = attn.to_v(ctx)
        heads = attn.heads
        bsz, n, inner = q.shape
        dh = inner // heads
        scale = 1.0 / math.sqrt(dh)
        tap = self.owner._tap
        t = self.owner._current_step
        outs = []
        for b in range(bsz):
            qb, kb, vb = q[b], k[b], v[b]
            replaced = None
            if tap is not None:
                replaced = tap.replace(self.layer_id, t, qb, kb, vb)
            if replaced is None:
                cols = []
                for hh in range(heads):
                    sl = slice(hh * dh, (hh + 1) * dh)
                    cols.append(_scaled_attention(qb[:, sl], kb[:, sl], vb[:, sl], scale))
                replaced = torch.cat(cols, dim=1)
            if tap is not None:
                tap.observe(self.layer_id, t, qb, kb, vb, replaced)
            outs.append(replaced)
        out = torch.stack(outs, dim=0)
        out = attn.to_out[0](out)
        out = attn.to_out[1](out)
        return out


class PretrainedBackend(BackendHandle):
    kind = "pretrained"

    def __init__(
        self,
        weight_source: Optional[str] = None,
        device: str = "cpu",
        view_resolution: int = 320,
    ):
        path = resolve_weight_source(weight_source)
        try:
            from diffusers import DiffusionPipeline  # noqa: PLC0415
        except ImportError as exc:
            raise BackendError(
                "the pretrained backend needs the 'pretrained' extra "
                "(pip install style3d[pretrained])"
            ) from exc
        try:
            pipe = DiffusionPipeline.from_pretrained(
                path, torch_dtype=torch.float32, local_files_only=True
            )
        except Exception as exc:
            raise BackendError(f"could not load pretrained weights from {path}: {exc}") from exc
        self.pipe = pipe.to(device)
        self.device = device
        self.view_resolution = view_resolution
        self.weight_source = path
        self._tap: Optional[AttentionTap] = None
        self._current_step: int = -1

        unet = self.pipe.unet
        names = [k.removesuffix(".processor") for k in unet.attn_processors.keys()]
        self.layer_names = tuple(names)
        missing = [l for l in DEFAULT_TARGET_LAYERS if l not in names]
        if missing:
            raise BackendError(
                "pretrained backbone lacks expected attention layers: "
                + ", ".join(missing)
            )
        unet.set_attn_processor(
            {
                f"{name}.processor": _TapProcessor(self, name)
                for name in names
            }
        )

    def make_schedule(self, steps: int) -> DiffusionSchedule:
        return make_schedule(steps)

    def encode_image(self, img: np.ndarray) -> torch.Tensor:
        img = to_float(np.asarray(img))
        x = torch.from_numpy(img.astype(np.float32)).permute(2, 0, 1)[None] * 2.0 - 1.0
        vae = self.pipe.vae
        with torch.no_grad():
            # deterministic: distribution mode, never a sample
            lat = vae.encode(x.to(self.device)).latent_dist.mode()
        return (lat * vae.config.scaling_factor).squeeze(0)

    def decode_latent(self, latent: torch.Tensor) -> np.ndarray:
        vae = self.pipe.vae
        with torch.no_grad():
            img = vae.decode(latent[None] / vae.config.scaling_factor).sample
        img = ((img + 1.0) * 0.5).clamp(0, 1).squeeze(0)
        return img.permute(1, 2, 0).cpu().numpy()

    def cond_tokens(self, img: np.ndarray) -> torch.Tensor:
        img = to_float(np.asarray(img))
        enc = getattr(self.pipe, "image_encoder", None)
        proc = getattr(self.pipe, "feature_extractor", None)
        if enc is None or proc is None:
            raise BackendError("pretrained pipeline exposes no image conditioning encoder")
        with torch.no_grad():
            inp = proc(images=img, return_tensors="pt", do_rescale=False)
            emb = enc(inp["pixel_values"].to(self.device)).last_hidden_state
        return emb.squeeze(0)

    def predict_noise(
        self,
        latent: torch.Tensor,
        t_index: int,
        cond: torch.Tensor,
        tap: Optional[AttentionTap] = None,
        schedule: Optional[DiffusionSchedule] = None,
    ) -> torch.Tensor:
        if schedule is None:
            raise BackendError("the pretrained backend needs the run schedule")
        # map the trajectory index onto the backbone's own timestep ids
        train_t = schedule.train_timesteps[max(t_index, 1) - 1]
        self._tap = tap
        self._current_step = t_index
        try:
            with torch.no_grad():
                out = self.pipe.unet(
                    latent[None].to(self.device),
                    torch.tensor([train_t], device=self.device),
                    encoder_hidden_states=cond[None].to(self.device),
                ).sample
        finally:
            self._tap = None
            self._current_step = -1
        return out.squeeze(0)
