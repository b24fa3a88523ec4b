"""Frames, pinhole cameras, BEV grid addressing and oriented boxes.

Conventions: world frame is z-up.  Camera frame is z forward, x right, y down;
a camera ``Pose`` maps camera coordinates to world coordinates directly, so
the axis swap lives inside its rotation (see :func:`camera_pose`).  Yaw is the
heading of a box's length axis about world z, measured from +x.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DomainError


def wrap_angle(a: float) -> float:
    """Map an angle into [-pi, pi)."""
    w = (a + math.pi) % (2 * math.pi) - math.pi
    return -math.pi if w >= math.pi else w


@dataclass(frozen=True)
class BevGridSpec:
    x_range: tuple = (-16.0, 16.0)
    y_range: tuple = (-16.0, 16.0)
    cell_size: float = 1.0

    def __post_init__(self):
        for lo, hi in (self.x_range, self.y_range):
            span = (hi - lo) / self.cell_size
            if hi <= lo or abs(span - round(span)) > 1e-9:
                raise ConfigError(f"range ({lo}, {hi}) is not a multiple of cell {self.cell_size}")
        if self.height < 4 or self.width < 4:
            raise ConfigError("BEV grid must be at least 4x4 cells")

    @property
    def height(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell_size))

    @property
    def width(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell_size))

    @property
    def shape(self) -> tuple:
        return self.height, self.width

    def cell_center(self, row: int, col: int, scale: int = 1) -> tuple:
        """World (x, y) of a cell center on the grid coarsened by ``scale``."""
        size = self.cell_size * scale
        return (self.x_range[0] + (col + 0.5) * size, self.y_range[0] + (row + 0.5) * size)

    def to_dict(self) -> dict:
        return {"x_range": list(self.x_range), "y_range": list(self.y_range),
                "cell_size": self.cell_size}

    @classmethod
    def from_dict(cls, d: dict) -> "BevGridSpec":
        return cls(tuple(d["x_range"]), tuple(d["y_range"]), float(d["cell_size"]))


def world_to_bev_cell(p, grid: BevGridSpec, scale: int = 1) -> Optional[tuple]:
    """(row, col) of the cell containing ``p``; None outside the half-open ranges."""
    x, y = float(p[0]), float(p[1])
    if not (grid.x_range[0] <= x < grid.x_range[1] and grid.y_range[0] <= y < grid.y_range[1]):
        return None
    size = grid.cell_size * scale
    col = int(math.floor((x - grid.x_range[0]) / size))
    row = int(math.floor((y - grid.y_range[0]) / size))
    return row, col


def world_to_bev_cells(xy: np.ndarray, grid: BevGridSpec) -> np.ndarray:
    """Vectorised flat cell index (row * W + col) per point, -1 when outside."""
    xy = np.asarray(xy, dtype=np.float64)
    inside = (
        (xy[:, 0] >= grid.x_range[0]) & (xy[:, 0] < grid.x_range[1])
        & (xy[:, 1] >= grid.y_range[0]) & (xy[:, 1] < grid.y_range[1])
    )
    col = np.floor((xy[:, 0] - grid.x_range[0]) / grid.cell_size).astype(np.int64)
    row = np.floor((xy[:, 1] - grid.y_range[0]) / grid.cell_size).astype(np.int64)
    col = np.clip(col, 0, grid.width - 1)
    row = np.clip(row, 0, grid.height - 1)
    return np.where(inside, row * grid.width + col, -1)


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ConfigError("pose needs a 3x3 rotation and a 3-vector translation")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1) > 1e-6:
            raise ConfigError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self`` after ``other``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def sensor_pose(position, yaw: float = 0.0) -> Pose:
    """Pose of a z-up sensor (LiDAR) at ``position`` heading ``yaw``."""
    return Pose(rot_z(yaw), np.asarray(position, dtype=np.float64))


def camera_pose(position, yaw: float, pitch: float = 0.0) -> Pose:
    """Camera-to-world pose looking along heading ``yaw``, tilted down by ``pitch``."""
    # columns: camera x (right), y (down), z (forward) in world coordinates
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    forward = np.array([cy * cp, sy * cp, -sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward], axis=1), np.asarray(position, dtype=np.float64))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def pixel_depth_to_camera(u, v, d, K: CameraIntrinsics) -> np.ndarray:
    u, v, d = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float), np.asarray(d, float))
    if np.any(d <= 0):
        raise DomainError("depth must be positive")
    return np.stack([(u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, d], axis=-1)


def pixel_depth_to_world(u, v, d, K: CameraIntrinsics, cam_pose: Pose) -> np.ndarray:
    """Back-project pixel (u, v) at depth ``d`` (camera z) into the world."""
    return cam_pose.apply(pixel_depth_to_camera(u, v, d, K))


def world_to_pixel(p, K: CameraIntrinsics, cam_pose: Pose) -> np.ndarray:
    """Forward projection; returns (..., 3) array of (u, v, depth)."""
    pc = cam_pose.inverse().apply(p)
    d = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * pc[..., 0] / d + K.cx
        v = K.fy * pc[..., 1] / d + K.cy
    return np.stack([u, v, d], axis=-1)


@dataclass(frozen=True)
class OrientedBox3D:
    center: tuple
    size: tuple  # (length, width, height)
    yaw: float
    class_id: int = 0
    score: Optional[float] = None

    def __post_init__(self):
        if len(self.center) != 3 or len(self.size) != 3:
            raise ConfigError("center and size must have three components")
        if any(s <= 0 for s in self.size):
            raise DomainError(f"box size must be positive, got {self.size}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        if self.score is not None:
            object.__setattr__(self, "score", float(self.score))

    @property
    def footprint_area(self) -> float:
        return self.size[0] * self.size[1]

    @property
    def volume(self) -> float:
        return self.size[0] * self.size[1] * self.size[2]

    def z_extent(self) -> tuple:
        return self.center[2] - self.size[2] / 2, self.center[2] + self.size[2] / 2

    def local_to_world(self) -> Pose:
        return Pose(rot_z(self.yaw), np.array(self.center))

    def to_dict(self) -> dict:
        d = {"center": list(self.center), "size": list(self.size), "yaw": self.yaw,
             "class_id": self.class_id}
        if self.score is not None:
            d["score"] = self.score
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OrientedBox3D":
        return cls(tuple(d["center"]), tuple(d["size"]), float(d["yaw"]), int(d["class_id"]),
                   d.get("score"))


def box_bev_corners(b: OrientedBox3D) -> np.ndarray:
    """Footprint corners (4, 2), counter-clockwise."""
    hl, hw = b.size[0] / 2, b.size[1] / 2
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array(b.center[:2])


def ray_box_intersect(origin, direction, box: OrientedBox3D) -> np.ndarray:
    """Entry parameter t >= 0 of rays ``origin + t * direction`` into ``box`` (inf on miss).

    ``direction`` may be (N, 3); origins may be (3,) or (N, 3).  Uses the slab
    method in the box frame.  Rays starting inside the box report t = 0.
    """
    inv = box.local_to_world().inverse()
    o = inv.apply(origin)
    d = np.asarray(direction, dtype=np.float64) @ inv.rotation.T
    half = np.array(box.size) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    # rays parallel to a slab: inside it → unconstrained, outside → miss
    parallel = d == 0
    outside = parallel & (np.abs(o) > half)
    tmin = np.where(parallel, -np.inf, tmin)
    tmax = np.where(parallel, np.inf, tmax)
    near = tmin.max(axis=-1)
    far = tmax.min(axis=-1)
    miss = (near > far) | (far < 0) | outside.any(axis=-1)
    return np.where(miss, np.inf, np.maximum(near, 0.0))


def point_box_distance(p, box: OrientedBox3D) -> np.ndarray:
    """Unsigned distance from points to the box surface."""
    q = np.abs(box.local_to_world().inverse().apply(p)) - np.array(box.size) / 2
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return np.abs(outside + inside)
