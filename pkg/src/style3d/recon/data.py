"""Posed supervision batches and their on-disk form.

A batch is N views of one object: RGB, binary mask, optional depth (camera
units) and optional unit normals, each with an orbit camera. On disk a
batch is a directory of per-view PNGs (rgb, mask), .npy float rasters
(depth, normal) and a cameras.json manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from ..cameras import Camera
from ..imgio import save_gray_png, save_png, to_float


@dataclass
class PosedViewBatch:
    images: torch.Tensor  # (N, H, W, 3) in [0, 1]
    masks: torch.Tensor  # (N, H, W) binary
    cameras: tuple[Camera, ...]
    depths: Optional[torch.Tensor] = None  # (N, H, W)
    normals: Optional[torch.Tensor] = None  # (N, H, W, 3), unit where mask=1

    def __post_init__(self) -> None:
        n, h, w, c = self.images.shape
        if c != 3:
            raise ValueError(f"images must be (N, H, W, 3), got {tuple(self.images.shape)}")
        if len(self.cameras) != n:
            raise ValueError(
                f"{n} images but {len(self.cameras)} cameras in batch"
            )
        if self.masks.shape != (n, h, w):
            raise ValueError(
                f"masks shape {tuple(self.masks.shape)} does not match images"
            )
        if not bool(((self.masks == 0) | (self.masks == 1)).all()):
            raise ValueError("masks must be binary")
        for cam in self.cameras:
            if (cam.height, cam.width) != (h, w):
                raise ValueError(
                    f"camera raster {cam.width}x{cam.height} does not match "
                    f"image raster {w}x{h}"
                )
        if self.depths is not None and self.depths.shape != (n, h, w):
            raise ValueError("depth rasters must be (N, H, W)")
        if self.normals is not None:
            if self.normals.shape != (n, h, w, 3):
                raise ValueError("normal rasters must be (N, H, W, 3)")
            m = self.masks.bool()
            norms = self.normals[m].norm(dim=-1)
            if norms.numel() and not bool(
                ((norms - 1.0).abs() < 1e-3).all()
            ):
                raise ValueError("normals must be unit length where mask=1")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def to(self, dtype: torch.dtype) -> "PosedViewBatch":
        return PosedViewBatch(
            images=self.images.to(dtype),
            masks=self.masks.to(dtype),
            cameras=self.cameras,
            depths=None if self.depths is None else self.depths.to(dtype),
            normals=None if self.normals is None else self.normals.to(dtype),
        )


def save_batch(batch: PosedViewBatch, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    for i in range(len(batch)):
        save_png(
            os.path.join(directory, f"rgb_{i}.png"), batch.images[i].numpy()
        )
        save_gray_png(
            os.path.join(directory, f"mask_{i}.png"), batch.masks[i].numpy()
        )
        if batch.depths is not None:
            np.save(
                os.path.join(directory, f"depth_{i}.npy"),
                batch.depths[i].numpy().astype(np.float32),
            )
        if batch.normals is not None:
            np.save(
                os.path.join(directory, f"normal_{i}.npy"),
                batch.normals[i].numpy().astype(np.float32),
            )
    manifest = {"cameras": [c.to_dict() for c in batch.cameras]}
    with open(os.path.join(directory, "cameras.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_batch(directory: str) -> PosedViewBatch:
    path = os.path.join(directory, "cameras.json")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no cameras.json in {directory}")
    with open(path) as fh:
        manifest = json.load(fh)
    cams = tuple(Camera.from_dict(d) for d in manifest["cameras"])
    images, masks, depths, normals = [], [], [], []
    from PIL import Image

    for i in range(len(cams)):
        rgb = to_float(np.asarray(Image.open(os.path.join(directory, f"rgb_{i}.png"))))
        m = np.asarray(Image.open(os.path.join(directory, f"mask_{i}.png")))
        images.append(torch.from_numpy(rgb[..., :3].copy()))
        masks.append(torch.from_numpy((m > 127).astype(np.float32)))
        dp = os.path.join(directory, f"depth_{i}.npy")
        np_ = os.path.join(directory, f"normal_{i}.npy")
        depths.append(torch.from_numpy(np.load(dp)) if os.path.isfile(dp) else None)
        normals.append(torch.from_numpy(np.load(np_)) if os.path.isfile(np_) else None)
    has_depth = all(d is not None for d in depths)
    has_norm = all(n is not None for n in normals)
    return PosedViewBatch(
        images=torch.stack(images),
        masks=torch.stack(masks),
        cameras=cams,
        depths=torch.stack(depths) if has_depth and depths else None,
        normals=torch.stack(normals) if has_norm and normals else None,
    )


def batch_from_views(
    views: Sequence[np.ndarray], cameras: Sequence[Camera], mask_threshold: float = 0.995
) -> PosedViewBatch:
    """Wrap generated views as a supervision batch, treating near-white
    pixels as background."""
    imgs = torch.stack([torch.from_numpy(to_float(np.asarray(v)).copy()) for v in views])
    fg = (imgs.min(dim=-1).values < mask_threshold).to(imgs.dtype)
    return PosedViewBatch(images=imgs, masks=fg, cameras=tuple(cameras))
