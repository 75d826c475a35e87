import math

import pytest
import torch

from style3d.cameras import Camera, generate_rays, world_to_cam_depth


def _cam(**kw):
    base = dict(elevation_deg=20.0, azimuth_deg=30.0, radius=2.5, fov_deg=30.0, width=33, height=33)
    base.update(kw)
    return Camera(**base)


def test_position_follows_orbit_trig():
    cam = _cam(elevation_deg=30.0, azimuth_deg=60.0, radius=2.0)
    p = cam.position(torch.float64)
    el, az = math.radians(30), math.radians(60)
    want = torch.tensor(
        [2 * math.cos(el) * math.cos(az), 2 * math.cos(el) * math.sin(az), 2 * math.sin(el)],
        dtype=torch.float64,
    )
    assert torch.allclose(p, want)
    assert float(p.norm()) == pytest.approx(2.0)


def test_cam_to_world_is_rigid_and_looks_at_origin():
    cam = _cam()
    m = cam.cam_to_world(torch.float64)
    r = m[:3, :3]
    assert torch.allclose(r.T @ r, torch.eye(3, dtype=torch.float64), atol=1e-12)
    assert float(torch.linalg.det(r)) == pytest.approx(1.0, abs=1e-12)
    # forward axis (+z, OpenCV) points from the eye to the origin
    fwd = r[:, 2]
    eye = m[:3, 3]
    assert torch.allclose(fwd, -eye / eye.norm(), atol=1e-12)


def test_center_ray_of_odd_raster_runs_down_the_optical_axis():
    cam = _cam(width=33, height=33)
    origins, dirs = generate_rays(cam, dtype=torch.float64)
    assert origins.shape == (33, 33, 3) and dirs.shape == (33, 33, 3)
    eye = cam.position(torch.float64)
    assert torch.allclose(origins[0, 0], eye, atol=1e-6)
    center = dirs[16, 16]
    assert torch.allclose(center, -eye / eye.norm(), atol=1e-9)
    assert torch.allclose(dirs.norm(dim=-1), torch.ones(33, 33, dtype=torch.float64), atol=1e-12)


def test_ray_spread_matches_field_of_view():
    cam = _cam(width=201, height=201, fov_deg=40.0)
    _, dirs = generate_rays(cam, dtype=torch.float64)
    center = dirs[100, 100]
    top = dirs[0, 100]
    half = math.acos(float((center * top).sum()))
    # top pixel center sits half a pixel inside the nominal frustum edge
    expect = math.atan(math.tan(math.radians(20.0)) * (100.0 / 100.5))
    assert half == pytest.approx(expect, abs=1e-3)


def test_depth_of_world_origin_equals_radius():
    cam = _cam(radius=3.25)
    d = world_to_cam_depth(torch.zeros(1, 3, dtype=torch.float64), cam)
    assert float(d) == pytest.approx(3.25, abs=1e-9)


def test_depth_decreases_toward_the_camera():
    cam = _cam()
    eye = cam.position(torch.float64)
    toward = (eye * 0.5).unsqueeze(0)
    d = world_to_cam_depth(toward, cam)
    assert float(d) == pytest.approx(cam.radius * 0.5, abs=1e-9)


def test_serialization_round_trip():
    cam = _cam(width=17, height=13, fov_deg=22.5)
    assert Camera.from_dict(cam.to_dict()) == cam


def test_validation_rejects_degenerate_cameras():
    with pytest.raises(ValueError):
        _cam(radius=0.0)
    with pytest.raises(ValueError):
        _cam(fov_deg=180.0)
    with pytest.raises(ValueError):
        _cam(elevation_deg=90.0)
    with pytest.raises(ValueError):
        _cam(width=0)


def test_intrinsics_use_vertical_fov():
    cam = _cam(width=64, height=32, fov_deg=60.0)
    fx, fy, cx, cy = cam.intrinsics()
    assert fy == pytest.approx(16.0 / math.tan(math.radians(30.0)))
    assert fx == fy
    assert (cx, cy) == (32.0, 16.0)
