"""Modality-specific BEV encoders: pillar LiDAR and depth-lift camera.

Each encoder has a plain forward (``*_encode``), a caching forward
(``*_forward``) and the matching analytic backward used for training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .geometry import BevGridSpec, CameraIntrinsics, Pose, world_to_bev_cells
from .scenegen import IMAGE_CHANNELS, PointCloud, SyntheticImage, pixel_rays

PILLAR_CHANNELS = 5
C_BEV = 16
DEPTH_BINS = 8


def init_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int = 1, padding: int = 0,
              scale: float = 1.0) -> T.ConvParams:
    std = scale * np.sqrt(2.0 / (c_in * k * k))
    w = (rng.standard_normal((c_out, c_in, k, k)) * std).astype(np.float32)
    return T.ConvParams(w, np.zeros(c_out, dtype=np.float32), 1, padding)


def conv_arrays(p: T.ConvParams, prefix: str) -> dict:
    return {f"{prefix}.weight": p.weight, f"{prefix}.bias": p.bias}


@dataclass
class PillarGrid:
    features: np.ndarray  # (PILLAR_CHANNELS, H, W)
    occupancy: np.ndarray  # (H, W) bool

    def as_tensor(self) -> np.ndarray:
        return self.features[None]


def voxelize(pc: PointCloud, grid: BevGridSpec) -> PillarGrid:
    """Aggregate points per BEV pillar.

    Features per occupied cell: mean x and y offset from the cell center, mean
    z, mean intensity, log(1 + count).
    """
    h, w = grid.shape
    feats = np.zeros((PILLAR_CHANNELS, h * w), dtype=np.float64)
    occ = np.zeros(h * w, dtype=bool)
    if len(pc.points):
        xyz = pc.world_xyz()
        idx = world_to_bev_cells(xyz[:, :2], grid)
        valid = idx >= 0
        xyz, idx = xyz[valid], idx[valid]
        inten = pc.points[valid, 3]
        counts = np.bincount(idx, minlength=h * w).astype(np.float64)
        occ = counts > 0
        rows, cols = idx // w, idx % w
        cx = grid.x_range[0] + (cols + 0.5) * grid.cell_size
        cy = grid.y_range[0] + (rows + 0.5) * grid.cell_size
        for ch, vals in enumerate((xyz[:, 0] - cx, xyz[:, 1] - cy, xyz[:, 2], inten)):
            sums = np.bincount(idx, weights=vals, minlength=h * w)
            feats[ch, occ] = sums[occ] / counts[occ]
        feats[4] = np.log1p(counts)
    return PillarGrid(feats.reshape(PILLAR_CHANNELS, h, w).astype(np.float32), occ.reshape(h, w))


@dataclass
class LidarEncoderParams:
    conv1: T.ConvParams
    conv2: T.ConvParams

    @classmethod
    def init(cls, rng, c_bev: int = C_BEV) -> "LidarEncoderParams":
        return cls(init_conv(rng, c_bev, PILLAR_CHANNELS, 3, 1), init_conv(rng, c_bev, c_bev, 3, 1))

    def arrays(self) -> dict:
        return {**conv_arrays(self.conv1, "conv1"), **conv_arrays(self.conv2, "conv2")}


def lidar_bev_forward(pg: PillarGrid, params: LidarEncoderParams):
    x = pg.as_tensor().astype(params.conv1.weight.dtype)
    z1 = T.conv2d(x, params.conv1)
    h1 = T.relu(z1)
    z2 = T.conv2d(h1, params.conv2)
    return T.relu(z2), (x, z1, h1, z2)


def lidar_bev_encode(pg: PillarGrid, params: LidarEncoderParams) -> np.ndarray:
    """conv3x3 -> relu -> conv3x3 -> relu over the pillar grid."""
    return lidar_bev_forward(pg, params)[0]


def lidar_bev_backward(grad, cache, params: LidarEncoderParams) -> dict:
    x, z1, h1, z2 = cache
    g = T.relu_backward(grad, z2)
    gh1, gw2, gb2 = T.conv2d_backward(g, h1, params.conv2)
    g = T.relu_backward(gh1, z1)
    _, gw1, gb1 = T.conv2d_backward(g, x, params.conv1)
    return {"conv1.weight": gw1, "conv1.bias": gb1, "conv2.weight": gw2, "conv2.bias": gb2}


@dataclass(frozen=True)
class DepthBins:
    centers: tuple

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        if len(c) < 2 or np.any(np.diff(c) <= 0) or c[0] <= 0:
            raise ConfigError("depth bins need >= 2 strictly increasing positive centers")

    @classmethod
    def uniform(cls, grid: BevGridSpec, n: int = DEPTH_BINS) -> "DepthBins":
        """``n`` equal-width bins spanning the grid diagonal."""
        diag = float(np.hypot(grid.x_range[1] - grid.x_range[0], grid.y_range[1] - grid.y_range[0]))
        return cls(tuple((np.arange(n) + 0.5) * diag / n))

    def __len__(self) -> int:
        return len(self.centers)


@dataclass(frozen=True)
class LiftGeometry:
    """BEV cell hit by every (bin, pixel) ray sample, -1 when off-grid."""

    cell_index: np.ndarray  # (D, P)
    counts: np.ndarray  # (H * W,)
    shape: tuple  # (H, W)


def lift_geometry(K: CameraIntrinsics, cam_pose: Pose, bins: DepthBins, grid: BevGridSpec) -> LiftGeometry:
    rays = pixel_rays(K, cam_pose)
    idx = np.stack([
        world_to_bev_cells((cam_pose.translation + rays * d)[:, :2], grid) for d in bins.centers
    ])
    valid = idx >= 0
    counts = np.bincount(idx[valid], minlength=grid.height * grid.width).astype(np.float64)
    return LiftGeometry(idx, counts, grid.shape)


def softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x.astype(np.float64) - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)


def lift_scatter(features: np.ndarray, probs: np.ndarray, geom: LiftGeometry) -> np.ndarray:
    """Sum feature x depth-probability mass into BEV cells.

    ``features`` is (C, P), ``probs`` is (D, P).  Returns (C, H*W) sums,
    accumulated in float64.
    """
    valid = geom.cell_index >= 0
    idx = geom.cell_index[valid]
    n_cells = geom.shape[0] * geom.shape[1]
    out = np.zeros((features.shape[0], n_cells))
    f64, p64 = features.astype(np.float64), probs.astype(np.float64)
    for c in range(features.shape[0]):
        out[c] = np.bincount(idx, weights=(p64 * f64[c][None, :])[valid], minlength=n_cells)
    return out


@dataclass
class CameraEncoderParams:
    depth: T.ConvParams  # image channels -> depth bins, 3x3
    proj: T.ConvParams  # image channels -> C_bev, 1x1

    @classmethod
    def init(cls, rng, n_bins: int = DEPTH_BINS, c_bev: int = C_BEV) -> "CameraEncoderParams":
        return cls(init_conv(rng, n_bins, IMAGE_CHANNELS, 3, 1, scale=0.5),
                   init_conv(rng, c_bev, IMAGE_CHANNELS, 1, 0))

    def arrays(self) -> dict:
        return {**conv_arrays(self.depth, "depth"), **conv_arrays(self.proj, "proj")}


def camera_bev_forward(img: SyntheticImage, geom: LiftGeometry, params: CameraEncoderParams):
    dt = params.proj.weight.dtype
    x = img.features[None].astype(dt)
    logits = T.conv2d(x, params.depth)[0]  # (D, h, w)
    d = logits.shape[0]
    probs = softmax(logits.reshape(d, -1), axis=0)
    feats = x[0].reshape(x.shape[1], -1)
    sums = lift_scatter(feats, probs, geom)
    norm = sums / np.maximum(geom.counts, 1.0)[None, :]
    bev = norm.reshape(1, -1, *geom.shape).astype(dt)
    out = T.conv2d(bev, params.proj)
    return out, (x, feats, probs, bev, geom)


def camera_bev_encode(img: SyntheticImage, K: CameraIntrinsics, cam_pose: Pose, bins: DepthBins,
                      params: CameraEncoderParams, grid: BevGridSpec, geom: LiftGeometry = None) -> np.ndarray:
    """Depth-distribution lift of image features into the BEV grid."""
    if geom is None:
        geom = lift_geometry(K, cam_pose, bins, grid)
    return camera_bev_forward(img, geom, params)[0]


def camera_bev_backward(grad, cache, params: CameraEncoderParams) -> dict:
    x, feats, probs, bev, geom = cache
    gbev, gwp, gbp = T.conv2d_backward(grad, bev, params.proj)
    gsums = gbev[0].reshape(gbev.shape[1], -1).astype(np.float64) / np.maximum(geom.counts, 1.0)[None, :]
    valid = geom.cell_index >= 0
    gprobs = np.zeros(probs.shape)
    safe = np.where(valid, geom.cell_index, 0)
    # d(sum)/d(prob[k, p]) = sum_c grad_sums[c, cell(k, p)] * feats[c, p]
    for c in range(feats.shape[0]):
        gprobs += gsums[c][safe] * feats[c].astype(np.float64)[None, :]
    gprobs *= valid
    p64 = probs.astype(np.float64)
    glogits = p64 * (gprobs - (gprobs * p64).sum(axis=0, keepdims=True))
    glogits = glogits.reshape(1, probs.shape[0], *x.shape[2:]).astype(grad.dtype)
    _, gwd, gbd = T.conv2d_backward(glogits, x.astype(grad.dtype), params.depth)
    return {"depth.weight": gwd, "depth.bias": gbd, "proj.weight": gwp, "proj.bias": gbp}
