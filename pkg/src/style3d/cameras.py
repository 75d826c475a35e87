"""Orbit cameras and ray generation.

World frame is right-handed with +z up; the object of interest lives in the
[-1, 1]^3 box. A camera sits on a sphere of given radius, looks at the
origin, and follows OpenCV axis conventions (x right, y down, z forward),
so reported depth is the forward distance in camera units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch


@dataclass(frozen=True)
class Camera:
    elevation_deg: float
    azimuth_deg: float
    radius: float
    fov_deg: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.radius > 0.0 and math.isfinite(self.radius)):
            raise ValueError(f"camera radius must be positive, got {self.radius}")
        if not (0.0 < self.fov_deg < 180.0):
            raise ValueError(f"camera fov must lie in (0, 180), got {self.fov_deg}")
        if abs(self.elevation_deg) >= 90.0:
            raise ValueError("camera elevation must stay strictly above the poles")
        if self.width < 1 or self.height < 1:
            raise ValueError("camera raster must be at least 1x1")

    def position(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        el = math.radians(self.elevation_deg)
        az = math.radians(self.azimuth_deg)
        p = (
            self.radius * math.cos(el) * math.cos(az),
            self.radius * math.cos(el) * math.sin(az),
            self.radius * math.sin(el),
        )
        return torch.tensor(p, dtype=dtype)

    def cam_to_world(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """4x4 rigid transform taking camera-frame points to world frame."""
        eye = self.position(torch.float64)
        forward = -eye / eye.norm()
        up_world = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
        right = torch.linalg.cross(forward, up_world)
        n = right.norm()
        if float(n) < 1e-8:
            raise ValueError("degenerate camera: view direction parallel to up axis")
        right = right / n
        down = torch.linalg.cross(forward, right)
        m = torch.eye(4, dtype=torch.float64)
        m[:3, 0] = right
        m[:3, 1] = down
        m[:3, 2] = forward
        m[:3, 3] = eye
        return m.to(dtype)

    def intrinsics(self) -> tuple[float, float, float, float]:
        """(fx, fy, cx, cy) for the pinhole model, square pixels, fov taken
        as the vertical opening angle."""
        fy = 0.5 * self.height / math.tan(0.5 * math.radians(self.fov_deg))
        return fy, fy, 0.5 * self.width, 0.5 * self.height

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            elevation_deg=float(d["elevation_deg"]),
            azimuth_deg=float(d["azimuth_deg"]),
            radius=float(d["radius"]),
            fov_deg=float(d["fov_deg"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def generate_rays(
    cam: Camera, dtype: torch.dtype = torch.float32
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel ray origins and unit directions in world space.

    Returns:
        origins (H, W, 3) and directions (H, W, 3).
    """
    fx, fy, cx, cy = cam.intrinsics()
    m = cam.cam_to_world(torch.float64)
    ii = torch.arange(cam.height, dtype=torch.float64) + 0.5
    jj = torch.arange(cam.width, dtype=torch.float64) + 0.5
    gi, gj = torch.meshgrid(ii, jj, indexing="ij")
    dirs_cam = torch.stack(
        [(gj - cx) / fx, (gi - cy) / fy, torch.ones_like(gi)], dim=-1
    )
    dirs = dirs_cam @ m[:3, :3].T
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    origins = m[:3, 3].expand_as(dirs)
    return origins.to(dtype).contiguous(), dirs.to(dtype).contiguous()


def world_to_cam_depth(points: torch.Tensor, cam: Camera) -> torch.Tensor:
    """Forward (z) component of world points in the camera frame."""
    m = torch.linalg.inv(cam.cam_to_world(torch.float64)).to(points.dtype)
    p = points @ m[:3, :3].T + m[:3, 3]
    return p[..., 2]
