"""Rigid transforms, pinhole projection of point clouds and the outlier oracle.

Depth maps throughout the package are plain ``(H, W)`` float arrays in meters
where ``0`` marks an invalid pixel. Pixel coordinates are ``(u, v)`` =
``(column, row)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

Collision = Literal["keep_nearest", "keep_last"]

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class PointCloud:
    """``(N, 3)`` points in meters with optional per-point intensity in [0, 1]."""

    points: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"intensity has {inten.shape[0]} entries for {pts.shape[0]} points"
                )
            object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class RigidPose:
    """Maps points as ``p' = R @ p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        check_rotation(R)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    def inverse(self) -> "RigidPose":
        Rt = self.rotation.T
        return RigidPose(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self ∘ other``: apply ``other`` first."""
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T


def check_rotation(R: np.ndarray, tol: float = _ORTHO_TOL) -> None:
    err = np.max(np.abs(R.T @ R - np.eye(3)))
    if not np.isfinite(err) or err > tol:
        raise ValueError(f"rotation is not orthonormal (max |R^T R - I| = {err:.3g})")
    det = np.linalg.det(R)
    if abs(det - 1.0) > tol:
        raise ValueError(f"rotation has determinant {det:.12g}, expected +1")


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("raster size must be at least 1x1")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def transform_points(cloud: PointCloud, pose: RigidPose) -> PointCloud:
    pts = cloud.points @ pose.rotation.T + pose.translation
    return PointCloud(pts, cloud.intensity)


def project_points(
    cloud: PointCloud, camera: CameraModel, collision: Collision = "keep_nearest"
) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points into a depth raster.

    Returns ``(depth, winner)`` where ``winner[v, u]`` is the index of the
    point stored at that pixel, or -1. Pixel centers sit at integer
    coordinates; ``np.rint`` rounds half to even.
    """
    if collision not in ("keep_nearest", "keep_last"):
        raise ValueError(f"unknown collision policy {collision!r}")
    H, W = camera.height, camera.width
    depth = np.zeros((H, W))
    winner = np.full((H, W), -1, dtype=np.int64)
    pts = cloud.points
    if len(pts) == 0:
        return depth, winner

    z = pts[:, 2]
    front = z > 0
    idx = np.nonzero(front)[0]
    x, y, z = pts[idx, 0], pts[idx, 1], z[idx]
    u = np.rint(camera.fx * x / z + camera.cx)
    v = np.rint(camera.fy * y / z + camera.cy)
    inside = (u >= 0) & (u < W) & (v >= 0) & (v < H)
    idx, z = idx[inside], z[inside]
    flat = v[inside].astype(np.int64) * W + u[inside].astype(np.int64)
    if flat.size == 0:
        return depth, winner

    if collision == "keep_nearest":
        # nearest z per pixel, earliest point on exact ties
        order = np.lexsort((idx, z, flat))
        first = np.ones(order.size, dtype=bool)
        first[1:] = flat[order][1:] != flat[order][:-1]
        chosen = order[first]
    else:
        order = np.lexsort((idx, flat))
        last = np.ones(order.size, dtype=bool)
        last[:-1] = flat[order][1:] != flat[order][:-1]
        chosen = order[last]

    depth.reshape(-1)[flat[chosen]] = z[chosen]
    winner.reshape(-1)[flat[chosen]] = idx[chosen]
    return depth, winner


def project_to_depthmap(
    cloud: PointCloud, camera: CameraModel, collision: Collision = "keep_nearest"
) -> np.ndarray:
    """Sparse depth map from a camera-frame cloud.

    No cross-pixel occlusion reasoning is done, so background points seen past
    a foreground edge by an offset sensor survive as outliers.
    """
    return project_points(cloud, camera, collision)[0]


def unproject(u, v, depth, camera: CameraModel) -> np.ndarray:
    """Camera-frame 3D point(s) for pixel coordinates and metric depth."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    x = (u - camera.cx) * z / camera.fx
    y = (v - camera.cy) * z / camera.fy
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def valid_mask(depth: np.ndarray) -> np.ndarray:
    return np.asarray(depth) > 0


def check_depthmap(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError(f"depth map must be 2-D, got shape {depth.shape}")
    if not np.all(np.isfinite(depth)) or np.any(depth < 0):
        raise ValueError("depth values must be finite and >= 0")
    return depth


def outlier_oracle(projected: np.ndarray, true_depth: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """``valid & |projected - true| > tau``; invalid pixels are never flagged."""
    projected = np.asarray(projected, dtype=np.float64)
    true_depth = np.asarray(true_depth, dtype=np.float64)
    if projected.shape != true_depth.shape:
        raise ValueError(
            f"raster size mismatch: projected {projected.shape} vs true {true_depth.shape}"
        )
    valid = projected > 0
    with np.errstate(invalid="ignore"):
        far = np.abs(projected - true_depth) > tau
    return valid & far
