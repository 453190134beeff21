"""Pinhole camera math shared by every other module.

World frame is right-handed and z-up. Camera frame is z-forward, x-right,
y-down. A world point p maps to camera coordinates R p + t and to pixels
through K.
"""
from typing import Optional, Tuple

import numpy as np

from .errors import GeometryError
from .types import Box2D, Box3D, CameraModel

EPS_DEPTH = 1e-3  # meters; anything closer to the camera plane is "behind"

# Corner index pairs forming the 12 edges of Box3D.corners()
_BOX_EDGES = [(a, b) for a in range(8) for b in range(a + 1, 8)
              if bin(a ^ b).count('1') == 1]


def to_camera(cam: CameraModel, points: np.ndarray) -> np.ndarray:
    """World points (N, 3) in the camera frame"""
    return np.asarray(points, dtype=np.float64).reshape(-1, 3) @ cam.R.T + cam.t


def _pixels(cam: CameraModel, pc: np.ndarray) -> np.ndarray:
    uvw = pc @ cam.K.T
    return uvw[:, :2] / uvw[:, 2:3]


def in_image(cam: CameraModel, uv: np.ndarray) -> np.ndarray:
    uv = np.atleast_2d(uv)
    return ((uv[:, 0] >= 0) & (uv[:, 0] < cam.width)
            & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height))


def project_points(cam: CameraModel, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized project_point.

    Returns (uv, depth, valid) where valid marks points in front of the camera
    that land inside the image. uv is NaN where the point is behind.
    """
    pc = to_camera(cam, points)
    depth = pc[:, 2]
    front = depth > EPS_DEPTH
    uv = np.full((len(pc), 2), np.nan)
    if np.any(front):
        uv[front] = _pixels(cam, pc[front])
    valid = front.copy()
    valid[front] = in_image(cam, uv[front])
    return uv, depth, valid


def project_point(cam: CameraModel, p) -> Optional[Tuple[np.ndarray, float]]:
    uv, depth, valid = project_points(cam, np.asarray(p, dtype=np.float64).reshape(1, 3))
    if not valid[0]:
        return None
    return uv[0], float(depth[0])


def frustum_mask(cam: CameraModel, box: Box2D, depth_range: Tuple[float, float],
                 points: np.ndarray) -> np.ndarray:
    """Vectorized frustum_contains over an (N, 3) point array"""
    near, far = depth_range
    if not near < far:
        raise GeometryError(f"empty depth range {depth_range}")
    uv, depth, valid = project_points(cam, points)
    inside = valid.copy()
    u, v = uv[valid, 0], uv[valid, 1]
    inside[valid] = ((box.x_min < u) & (u < box.x_max)
                     & (box.y_min < v) & (v < box.y_max)
                     & (depth[valid] >= near) & (depth[valid] <= far))
    return inside


def frustum_contains(cam: CameraModel, box: Box2D, depth_range: Tuple[float, float], p) -> bool:
    return bool(frustum_mask(cam, box, depth_range, np.asarray(p, dtype=np.float64).reshape(1, 3))[0])


def project_box3d(cam: CameraModel, box: Box3D) -> Optional[Box2D]:
    pc = to_camera(cam, box.corners())
    visible = pc[:, 2] > EPS_DEPTH
    if not np.any(visible):
        return None

    support = [pc[visible]]
    # Edges crossing the near plane are cut at z = EPS_DEPTH so that corners
    # behind the camera cannot wrap around.
    for a, b in _BOX_EDGES:
        if visible[a] != visible[b]:
            za, zb = pc[a, 2], pc[b, 2]
            s = (EPS_DEPTH - za) / (zb - za)
            cut = pc[a] + s * (pc[b] - pc[a])
            cut[2] = EPS_DEPTH
            support.append(cut[None, :])
    uv = _pixels(cam, np.vstack(support))

    x_min = float(np.clip(uv[:, 0].min(), 0, cam.width))
    x_max = float(np.clip(uv[:, 0].max(), 0, cam.width))
    y_min = float(np.clip(uv[:, 1].min(), 0, cam.height))
    y_max = float(np.clip(uv[:, 1].max(), 0, cam.height))
    if x_min >= x_max or y_min >= y_max:
        return None
    return Box2D(x_min, y_min, x_max, y_max, score=box.score, class_id=box.class_id)


def backproject(cam: CameraModel, pixel, depth: float) -> np.ndarray:
    if not depth > 0:
        raise GeometryError(f"back-projection depth must be positive, got {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    ray = np.linalg.solve(cam.K, np.array([u, v, 1.0]))
    pc = ray * depth
    return cam.R.T @ (pc - cam.t)


def camera_depth(cam: CameraModel, p) -> float:
    """z of a world point in the camera frame, without visibility checks"""
    return float(to_camera(cam, p)[0, 2])
