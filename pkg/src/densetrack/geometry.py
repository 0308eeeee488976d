"""Pointmap geometry: pinhole unprojection/projection, rigid transforms, motion fields.

Conventions used throughout the package:
  * Pixel coordinates are (i, j) with i = column and j = row; pixel centers
    sit at integer coordinates (no half-pixel offset).  Arrays are indexed
    ``data[j, i]``.
  * Extrinsics are world-to-camera: ``x_cam = R @ x_world + t``.
  * All math here is double precision; this module is the numeric reference
    the rest of the package is tested against.

All operations are pure functions; nothing here holds mutable state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

ORTHONORMAL_TOL = 1e-6


class GeometryError(ValueError):
    """Raised for degenerate cameras, poses, or mismatched maps."""


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole calibration. Focal lengths and principal point in pixels."""

    fx: float
    fy: float
    px: float
    py: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.px < self.width and 0 <= self.py < self.height):
            raise GeometryError(
                f"principal point ({self.px}, {self.py}) outside image {self.width}x{self.height}"
            )

    def matrix(self) -> np.ndarray:
        """3x3 upper-triangular calibration matrix (unit bottom-right entry)."""
        return np.array(
            [[self.fx, 0.0, self.px], [0.0, self.fy, self.py], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    def inverse_matrix(self) -> np.ndarray:
        """Closed-form inverse of the calibration matrix."""
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.px / self.fx],
                [0.0, 1.0 / self.fy, -self.py / self.fy],
                [0.0, 0.0, 1.0],
            ],
            dtype=np.float64,
        )

    @classmethod
    def from_matrix(cls, K: np.ndarray, width: int, height: int) -> "Intrinsics":
        K = np.asarray(K, dtype=np.float64)
        if K.shape != (3, 3):
            raise GeometryError(f"expected 3x3 matrix, got {K.shape}")
        return cls(fx=float(K[0, 0]), fy=float(K[1, 1]), px=float(K[0, 2]),
                   py=float(K[1, 2]), width=width, height=height)


@dataclass(frozen=True)
class Extrinsics:
    """World-to-camera rigid pose: ``x_cam = rotation @ x_world + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {R.shape}")
        if not np.allclose(R @ R.T, np.eye(3), atol=ORTHONORMAL_TOL):
            raise GeometryError("rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise GeometryError("rotation has negative determinant")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Extrinsics":
        return cls(np.eye(3), np.zeros(3))

    def camera_center(self) -> np.ndarray:
        """Camera center in world coordinates: ``-R^T t``."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def camera_to_world(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - self.translation) @ self.rotation


@dataclass
class PointMap:
    """H x W x 3 grid of 3D positions with frame-of-reference metadata.

    ``data[j, i]`` is the 3D position, at the time of ``time_frame``, of the
    scene point seen at pixel (i, j) of ``source_frame``, expressed in
    ``coord_frame``'s camera coordinates.
    """

    data: np.ndarray
    source_frame: int
    time_frame: int
    coord_frame: int
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise GeometryError(f"pointmap must be HxWx3, got {self.data.shape}")
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.data.shape[:2]:
                raise GeometryError("valid mask shape does not match pointmap")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def validity(self) -> np.ndarray:
        if self.valid is None:
            return np.ones(self.shape, dtype=bool)
        return self.valid


@dataclass
class DepthMap:
    """H x W depth map; valid entries are strictly positive and finite."""

    data: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.data.shape != self.valid.shape:
            raise GeometryError("depth and valid mask shapes differ")
        vals = self.data[self.valid]
        if vals.size and not (np.all(np.isfinite(vals)) and np.all(vals > 0)):
            raise GeometryError("valid depth entries must be finite and > 0")


@dataclass
class MotionMap:
    """Per-pixel 3D displacement of frame ``source_time`` pixels to ``query_time``."""

    data: np.ndarray
    valid: np.ndarray
    source_time: int
    query_time: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise GeometryError(f"motion map must be HxWx3, got {self.data.shape}")
        if self.valid.shape != self.data.shape[:2]:
            raise GeometryError("valid mask shape does not match motion map")


def unproject(pixel: tuple[float, float], depth: float, K: Intrinsics) -> np.ndarray:
    """Lift pixel (i, j) at the given depth to camera coordinates.

    Returns ``K^-1 @ (i*d, j*d, d)``, i.e. ((i-px)*d/fx, (j-py)*d/fy, d).
    """
    if depth <= 0:
        raise GeometryError(f"depth must be positive, got {depth}")
    i, j = pixel
    if not (0 <= i < K.width and 0 <= j < K.height):
        raise GeometryError(f"pixel ({i}, {j}) outside image {K.width}x{K.height}")
    return K.inverse_matrix() @ np.array([i * depth, j * depth, depth], dtype=np.float64)


def project(point: np.ndarray, K: Intrinsics) -> tuple[tuple[float, float], float]:
    """Project a camera-frame point to (pixel, depth). Left inverse of unproject."""
    point = np.asarray(point, dtype=np.float64).reshape(3)
    if point[2] <= 0:
        raise GeometryError(f"point behind camera: z={point[2]}")
    h = K.matrix() @ point
    return (float(h[0] / h[2]), float(h[1] / h[2])), float(point[2])


def pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Meshgrids of pixel coordinates i (columns) and j (rows), each H x W."""
    jj, ii = np.meshgrid(
        np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij"
    )
    return ii, jj


def unproject_depthmap(depth: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Vectorised unprojection of a full H x W depth map to an H x W x 3 grid."""
    depth = np.asarray(depth, dtype=np.float64)
    ii, jj = pixel_grid(K.width, K.height)
    if depth.shape != ii.shape:
        raise GeometryError(f"depth shape {depth.shape} does not match intrinsics "
                            f"{K.height}x{K.width}")
    x = (ii - K.px) * depth / K.fx
    y = (jj - K.py) * depth / K.fy
    return np.stack([x, y, depth], axis=-1)


def project_points(points: np.ndarray, K: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project an (..., 3) array of camera-frame points to pixels and depths.

    No behind-camera check; callers filter on the returned depth.
    """
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    u = K.fx * points[..., 0] / z + K.px
    v = K.fy * points[..., 1] / z + K.py
    return np.stack([u, v], axis=-1), z


def relative_transform(pose_src: Extrinsics, pose_dst: Extrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Rigid map from src camera coordinates to dst camera coordinates.

    Returns (R, t) with ``x_dst = R @ x_src + t``.
    """
    R = pose_dst.rotation @ pose_src.rotation.T
    t = pose_dst.translation - R @ pose_src.translation
    return R, t


def transform_points(points: np.ndarray, pose_src: Extrinsics, pose_dst: Extrinsics) -> np.ndarray:
    """Re-express (..., 3) points given in src camera frame in dst camera frame."""
    R, t = relative_transform(pose_src, pose_dst)
    return np.asarray(points, dtype=np.float64) @ R.T + t


def transform_pointmap(
    pm: PointMap, pose_src: Extrinsics, pose_dst: Extrinsics, *, dst_frame: int | None = None
) -> PointMap:
    """Rigidly re-express a pointmap from src's camera frame into dst's.

    ``dst_frame`` updates the coord_frame metadata; it defaults to the source
    map's coord_frame for pure numeric round trips.
    """
    data = transform_points(pm.data, pose_src, pose_dst)
    new_frame = pm.coord_frame if dst_frame is None else dst_frame
    return replace(pm, data=data, coord_frame=new_frame)


def motion_field(x_q: PointMap, x_t: PointMap) -> MotionMap:
    """Displacement map ``x_q - x_t`` for pixels of a common source frame."""
    if x_q.data.shape != x_t.data.shape:
        raise GeometryError(f"shape mismatch: {x_q.data.shape} vs {x_t.data.shape}")
    if x_q.source_frame != x_t.source_frame:
        raise GeometryError(
            f"source frames differ: {x_q.source_frame} vs {x_t.source_frame}"
        )
    if x_q.coord_frame != x_t.coord_frame:
        raise GeometryError(f"coord frames differ: {x_q.coord_frame} vs {x_t.coord_frame}")
    return MotionMap(
        data=x_q.data - x_t.data,
        valid=x_q.validity() & x_t.validity(),
        source_time=x_t.time_frame,
        query_time=x_q.time_frame,
    )


def look_at(camera_center: np.ndarray, target: np.ndarray,
            up: np.ndarray = (0.0, -1.0, 0.0)) -> Extrinsics:
    """World-to-camera pose for a camera at ``camera_center`` looking at ``target``.

    Camera axes: +z forward (toward target), +x right, +y down; ``up`` is the
    world up direction used to fix roll.
    """
    center = np.asarray(camera_center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise GeometryError("camera center coincides with look-at target")
    fwd = fwd / n
    down = -np.asarray(up, dtype=np.float64)
    right = np.cross(down, fwd)
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        raise GeometryError("look direction parallel to up vector")
    right = right / rn
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    return Extrinsics(rotation=R, translation=-R @ center)
