"""Deterministic synthetic scenes with simulated LiDAR and camera observations."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError
from .geometry import (
    BevGridSpec,
    CameraIntrinsics,
    OrientedBox3D,
    Pose,
    box_bev_corners,
    ray_box_intersect,
)

CLASS_NAMES = ("car", "bus", "pedestrian", "cyclist")
NUM_CLASSES = len(CLASS_NAMES)
# (length, width, height) in meters
SIZE_PRIORS = np.array([
    [4.5, 1.8, 1.5],
    [10.0, 2.5, 3.0],
    [0.8, 0.8, 1.75],
    [1.8, 0.7, 1.6],
])
CLASS_FREQ = np.array([0.5, 0.1, 0.2, 0.2])
REFLECTIVITY = np.array([0.6, 0.85, 0.3, 0.45])
SIZE_JITTER = 0.1
MAX_FOOTPRINT_IOU = 0.05
# one-hot class channels, then normalised (u, v) pixel coordinates
IMAGE_CHANNELS = NUM_CLASSES + 2


@dataclass(frozen=True)
class Scene:
    objects: tuple
    seed: int
    grid: BevGridSpec = field(default_factory=BevGridSpec)

    def __post_init__(self):
        if len(self.objects) < 1:
            raise GenerationError("a scene needs at least one object")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "grid": self.grid.to_dict(),
                "objects": [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(tuple(OrientedBox3D.from_dict(o) for o in d["objects"]), int(d["seed"]),
                   BevGridSpec.from_dict(d["grid"]))


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 4): x, y, z in the sensor frame, intensity
    pose: Pose = field(default_factory=Pose)  # sensor -> world

    def world_xyz(self) -> np.ndarray:
        return self.pose.apply(self.points[:, :3]) if len(self.points) else np.zeros((0, 3))


@dataclass(frozen=True)
class SyntheticImage:
    features: np.ndarray  # (IMAGE_CHANNELS, height, width), zero on background
    depth: np.ndarray  # (height, width) hidden ground-truth depth, inf on background
    class_map: np.ndarray  # (height, width) class id, -1 on background

    @property
    def foreground(self) -> np.ndarray:
        return self.class_map >= 0


def _footprint_inside(box: OrientedBox3D, grid: BevGridSpec) -> bool:
    c = box_bev_corners(box)
    return bool(
        np.all(c[:, 0] >= grid.x_range[0]) and np.all(c[:, 0] < grid.x_range[1])
        and np.all(c[:, 1] >= grid.y_range[0]) and np.all(c[:, 1] < grid.y_range[1])
    )


def generate_scene(seed: int, n_objects: int, grid: BevGridSpec, keep_out=(),
                   max_tries: int = 2000) -> Scene:
    """Place ``n_objects`` non-overlapping boxes inside ``grid``.

    ``keep_out`` is a sequence of (x, y, radius) discs (sensor mounts) that
    object footprints must not enter.
    """
    from .metrics import iou_bev

    if n_objects < 1:
        raise GenerationError("n_objects must be >= 1")
    rng = np.random.default_rng(seed)
    placed = []
    tries = 0
    while len(placed) < n_objects:
        tries += 1
        if tries > max_tries:
            raise GenerationError(f"could not place {n_objects} objects after {max_tries} tries")
        cls = int(rng.choice(NUM_CLASSES, p=CLASS_FREQ))
        size = SIZE_PRIORS[cls] * rng.uniform(1 - SIZE_JITTER, 1 + SIZE_JITTER, 3)
        x = rng.uniform(*grid.x_range)
        y = rng.uniform(*grid.y_range)
        # boxes carry no heading cue, so yaw is drawn from one half-turn
        yaw = rng.uniform(-math.pi / 2, math.pi / 2)
        box = OrientedBox3D((x, y, size[2] / 2), tuple(size), yaw, cls)
        if not _footprint_inside(box, grid):
            continue
        radius = 0.5 * math.hypot(size[0], size[1])
        if any(math.hypot(x - kx, y - ky) < kr + radius for kx, ky, kr in keep_out):
            continue
        if any(iou_bev(box, other) > MAX_FOOTPRINT_IOU for other in placed):
            continue
        placed.append(box)
    return Scene(tuple(placed), int(seed), grid)


# faces in the box frame: (axis, sign)
_FACES = [(a, s) for a in range(3) for s in (1.0, -1.0)]


def _visible_faces(box: OrientedBox3D, sensor_local: np.ndarray):
    half = np.array(box.size) / 2
    return [(a, s) for a, s in _FACES if s * sensor_local[a] > half[a]]


def _nearest_hits(origin, dirs, objects) -> tuple:
    ts = np.stack([ray_box_intersect(origin, dirs, o) for o in objects], axis=0)
    return ts.min(axis=0), ts.argmin(axis=0)


def simulate_lidar(scene: Scene, sensor_pose: Pose, rays_per_object: int = 64,
                   noise_sigma: float = 0.02, seed: int = 0) -> PointCloud:
    """Sample visible box surfaces, drop occluded samples, add range noise.

    Returned points live in the sensor frame; intensity encodes a per-class
    reflectivity with small noise.
    """
    if rays_per_object < 1:
        raise GenerationError("rays_per_object must be >= 1")
    rng = np.random.default_rng(seed)
    origin = sensor_pose.translation
    chunks = []
    for idx, box in enumerate(scene.objects):
        to_local = box.local_to_world().inverse()
        faces = _visible_faces(box, to_local.apply(origin))
        if not faces:
            continue
        half = np.array(box.size) / 2
        areas = np.array([np.prod(np.delete(2 * half, a)) for a, _ in faces])
        choice = rng.choice(len(faces), size=rays_per_object, p=areas / areas.sum())
        local = rng.uniform(-1.0, 1.0, (rays_per_object, 3)) * half
        for k, (a, s) in enumerate(faces):
            local[choice == k, a] = s * half[a]
        world = box.local_to_world().apply(local)
        dirs = world - origin
        t_hit, owner = _nearest_hits(origin, dirs, scene.objects)
        keep = (owner == idx) & (t_hit > 1.0 - 1e-9)
        rng_noise = rng.normal(0.0, 1.0, rays_per_object) * noise_sigma
        dirs, rng_noise = dirs[keep], rng_noise[keep]
        if len(dirs) == 0:
            continue
        dist = np.linalg.norm(dirs, axis=1)
        pts = origin + dirs * ((dist + rng_noise) / dist)[:, None]
        inten = np.clip(REFLECTIVITY[box.class_id] + rng.normal(0, 0.05, len(pts)), 0.0, 1.0)
        chunks.append(np.column_stack([sensor_pose.inverse().apply(pts), inten]))
    points = np.concatenate(chunks) if chunks else np.zeros((0, 4))
    return PointCloud(points.astype(np.float64), sensor_pose)


def pixel_rays(K: CameraIntrinsics, cam_pose: Pose) -> np.ndarray:
    """World-frame ray directions through pixel centers, camera-z component 1."""
    v, u = np.mgrid[0: K.height, 0: K.width]
    cam = np.stack([(u + 0.5 - K.cx) / K.fx, (v + 0.5 - K.cy) / K.fy, np.ones(u.shape)], axis=-1)
    return cam.reshape(-1, 3) @ cam_pose.rotation.T


def simulate_camera(scene: Scene, K: CameraIntrinsics, cam_pose: Pose, seed: int = 0,
                    noise_sigma: float = 0.0) -> SyntheticImage:
    """Ray-cast every pixel against the scene boxes.

    Foreground pixels carry a one-hot class code and their normalised pixel
    coordinates; background pixels are all-zero with infinite depth.
    ``noise_sigma`` perturbs foreground class codes deterministically per seed.
    """
    dirs = pixel_rays(K, cam_pose)
    t_hit, owner = _nearest_hits(cam_pose.translation, dirs, scene.objects)
    # a camera inside a box would report t = 0; treat as no observation
    hit = np.isfinite(t_hit) & (t_hit > 0)
    classes = np.array([o.class_id for o in scene.objects])
    class_map = np.where(hit, classes[owner], -1).reshape(K.height, K.width)
    depth = np.where(hit, t_hit, np.inf).reshape(K.height, K.width)
    feats = np.zeros((IMAGE_CHANNELS, K.height, K.width), dtype=np.float32)
    fg = class_map >= 0
    rows, cols = np.nonzero(fg)
    feats[class_map[fg], rows, cols] = 1.0
    feats[NUM_CLASSES, rows, cols] = (cols + 0.5) / K.width
    feats[NUM_CLASSES + 1, rows, cols] = (rows + 0.5) / K.height
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, noise_sigma, (NUM_CLASSES, K.height, K.width)).astype(np.float32)
        feats[:NUM_CLASSES] += noise * fg
    return SyntheticImage(feats, depth, class_map)
