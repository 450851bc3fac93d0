"""Shared synthetic-camera fixtures.

The look-at camera construction here is intentionally separate from the
library: tests build ground-truth projections from first principles and the
library has to recover them.
"""

from __future__ import annotations

import numpy as np
import pytest

from carom.calib import CameraModel, ground_transform_from_camera


def make_projection(position, yaw_deg, pitch_down_deg, f=1000.0,
                    size=(1280, 720), roll_deg=0.0) -> np.ndarray:
    """3x4 pinhole projection for a camera at `position` looking along the
    world direction given by yaw (CCW from +x) and pitch below horizontal."""
    yaw = np.radians(yaw_deg)
    pitch = np.radians(pitch_down_deg)
    fwd = np.array([np.cos(yaw) * np.cos(pitch),
                    np.sin(yaw) * np.cos(pitch),
                    -np.sin(pitch)])
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    if roll_deg:
        r = np.radians(roll_deg)
        right, down = (np.cos(r) * right + np.sin(r) * down,
                       -np.sin(r) * right + np.cos(r) * down)
    rot = np.stack([right, down, fwd])  # world -> camera
    k = np.array([[f, 0, size[0] / 2.0],
                  [0, f, size[1] / 2.0],
                  [0, 0, 1.0]])
    t = -rot @ np.asarray(position, dtype=float)
    p = k @ np.hstack([rot, t[:, None]])
    return p / np.linalg.norm(p[2, :3])


def camera_from_matrix(p, size=(1280, 720)) -> CameraModel:
    from carom.calib import _horizon_from_projection

    hig = p[:, [0, 1, 3]]
    return CameraModel(projection=p,
                       ground_homography=np.linalg.inv(hig),
                       horizon=_horizon_from_projection(p),
                       image_size=size)


@pytest.fixture
def traffic_camera() -> CameraModel:
    """Mast-mounted camera 12 m up, looking down the +x road."""
    p = make_projection(position=(0.0, 0.0, 12.0), yaw_deg=0.0, pitch_down_deg=12.0)
    return camera_from_matrix(p)


@pytest.fixture
def traffic_transform(traffic_camera):
    return ground_transform_from_camera(traffic_camera)
