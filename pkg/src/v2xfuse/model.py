"""End-to-end cooperative detector: encoders, node fusion, wire hop, ASR/HAF, dense head."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .coop_fusion import AsrPolicy, FusedResult, HafParams, asr_backward, asr_forward, select_scale
from .encoders import (
    C_BEV,
    DEPTH_BINS,
    CameraEncoderParams,
    LidarEncoderParams,
    camera_bev_backward,
    camera_bev_forward,
    conv_arrays,
    init_conv,
    lidar_bev_backward,
    lidar_bev_forward,
)
from .geometry import BevGridSpec, OrientedBox3D, wrap_angle
from .node_fusion import NodeFusionParams, SensorSet, node_features_backward, node_features_forward
from .scenegen import NUM_CLASSES, SIZE_PRIORS
from .wire import MessageMeta, decode_message, encode_message

REG_CHANNELS = 6  # dx, dy, log l, log w, sin yaw, cos yaw
FOCAL_GAMMA = 2.0
SMOOTH_L1_BETA = 0.1
BOX_WEIGHT = 1.0
BG_PRIOR = 0.99
MIN_SCORE = 0.05
# statistics of the inference-form norm layers are stored, never trained
FROZEN_SUFFIXES = (".running_mean", ".running_var")


@dataclass
class HeadParams:
    cls: T.ConvParams  # C -> K + 1, 1x1
    reg: T.ConvParams  # C -> 6, 1x1

    @classmethod
    def init(cls, rng, c: int = C_BEV, n_classes: int = NUM_CLASSES) -> "HeadParams":
        cls_conv = init_conv(rng, n_classes + 1, c, scale=0.1)
        cls_conv.bias[0] = math.log(BG_PRIOR * n_classes / (1 - BG_PRIOR))
        return cls(cls_conv, init_conv(rng, REG_CHANNELS, c, scale=0.1))

    def arrays(self) -> dict:
        return {**conv_arrays(self.cls, "cls"), **conv_arrays(self.reg, "reg")}


@dataclass
class ModelParams:
    lidar: LidarEncoderParams
    camera: CameraEncoderParams
    node: NodeFusionParams
    haf: HafParams
    head: HeadParams

    @classmethod
    def init(cls, seed: int, c_bev: int = C_BEV, n_bins: int = DEPTH_BINS) -> "ModelParams":
        rng = np.random.default_rng(seed)
        return cls(
            LidarEncoderParams.init(rng, c_bev),
            CameraEncoderParams.init(rng, n_bins, c_bev),
            NodeFusionParams.init(rng, c_bev, c_bev),
            HafParams.init(rng, c_bev),
            HeadParams.init(rng, c_bev),
        )

    def arrays(self) -> dict:
        """Flat name -> array view of every parameter (shared storage)."""
        out = {}
        for prefix in ("lidar", "camera", "node", "haf", "head"):
            for k, v in getattr(self, prefix).arrays().items():
                out[f"{prefix}.{k}"] = v
        return out

    def trainable(self) -> dict:
        return {k: v for k, v in self.arrays().items() if not k.endswith(FROZEN_SUFFIXES)}

    def astype(self, dtype) -> "ModelParams":
        """Deep copy with every array converted (float64 copies for gradient checks)."""
        clone = ModelParams.init(0, self.haf.channels, self.camera.depth.out_channels)
        dst = clone.arrays()
        src = self.arrays()
        _rebind(clone, {k: src[k].astype(dtype) for k in dst})
        return clone


def _rebind(params: ModelParams, arrays: dict):
    """Swap array objects in place (ConvParams is frozen, so rebuild those)."""
    def conv(p, prefix):
        return T.ConvParams(arrays[f"{prefix}.weight"], arrays[f"{prefix}.bias"], p.stride, p.padding)

    params.lidar.conv1 = conv(params.lidar.conv1, "lidar.conv1")
    params.lidar.conv2 = conv(params.lidar.conv2, "lidar.conv2")
    params.camera.depth = conv(params.camera.depth, "camera.depth")
    params.camera.proj = conv(params.camera.proj, "camera.proj")
    n = params.node
    n.fuse_conv = conv(n.fuse_conv, "node.fuse_conv")
    n.lidar_adapter = conv(n.lidar_adapter, "node.lidar_adapter")
    n.camera_adapter = conv(n.camera_adapter, "node.camera_adapter")
    for norm_name in ("fuse_norm", "lidar_norm", "camera_norm"):
        norm = getattr(n, norm_name)
        for f in ("gamma", "beta", "running_mean", "running_var"):
            setattr(norm, f, arrays[f"node.{norm_name}.{f}"])
    params.haf.w_channel = arrays["haf.w_channel"]
    for role, sp in params.haf.spatial.items():
        sp.conv1 = conv(sp.conv1, f"haf.{role}.conv1")
        sp.conv2 = conv(sp.conv2, f"haf.{role}.conv2")
    params.head.cls = conv(params.head.cls, "head.cls")
    params.head.reg = conv(params.head.reg, "head.reg")


def load_arrays(params: ModelParams, arrays: dict):
    """Copy named arrays into ``params`` (shapes must match)."""
    current = params.arrays()
    missing = set(current) - set(arrays)
    if missing:
        raise KeyError(f"missing parameters: {sorted(missing)}")
    for k, v in current.items():
        if v.shape != arrays[k].shape:
            raise ValueError(f"shape mismatch for {k}: {v.shape} vs {arrays[k].shape}")
        v[...] = arrays[k]


@dataclass
class NodeObservation:
    """Encoder inputs for one node; either may be None if that sensor is absent."""

    pillars: object = None  # PillarGrid
    image: object = None  # SyntheticImage
    lift: object = None  # LiftGeometry


@dataclass
class ForwardOutput:
    fused: FusedResult
    cls_logits: np.ndarray
    reg: np.ndarray
    scale: int  # cell-size multiplier of the head grid
    cache: dict = field(default_factory=dict, repr=False)


def _node_forward(obs: NodeObservation, s: SensorSet, params: ModelParams, shape):
    f_lidar = f_cam = None
    cache = {}
    if s.has_lidar:
        f_lidar, cache["lidar"] = lidar_bev_forward(obs.pillars, params.lidar)
    if s.has_camera:
        f_cam, cache["camera"] = camera_bev_forward(obs.image, obs.lift, params.camera)
    feat, cache["node"] = node_features_forward(s, f_cam, f_lidar, params.node, shape)
    return feat, cache


def wire_hop(f: np.ndarray, meta: MessageMeta) -> np.ndarray:
    """Ship a feature map through the binary message format and back."""
    if f.dtype != np.float32:
        return f
    out, _ = decode_message(encode_message(f, meta))
    return out


def forward(params: ModelParams, obs: dict, vehicle: SensorSet, infra: SensorSet,
            policy: AsrPolicy, grid: BevGridSpec, timestamp_us: int = 0) -> ForwardOutput:
    """Run the whole pipeline; ``obs`` maps role -> NodeObservation."""
    dtype = params.head.cls.weight.dtype
    shape = (1, params.haf.channels, grid.height, grid.width)
    f_v, cache_v = _node_forward(obs["vehicle"], vehicle, params, shape)
    f_i, cache_i = _node_forward(obs["infra"], infra, params, shape)
    f_v, f_i = f_v.astype(dtype), f_i.astype(dtype)
    f_i = wire_hop(f_i, MessageMeta(1, infra.code, select_scale(infra, policy), timestamp_us))
    fused, asr_cache = asr_forward(f_v, f_i, vehicle, infra, params.haf, policy)
    logits = T.conv2d(fused.f_final, params.head.cls)
    reg = T.conv2d(fused.f_final, params.head.reg)
    cache = {"vehicle": (vehicle, cache_v), "infra": (infra, cache_i), "asr": asr_cache}
    return ForwardOutput(fused, logits, reg, min(fused.scales_used), cache)


def _node_backward(grad, s, cache, params, grads):
    g_cam, g_lidar, gp = node_features_backward(grad, cache["node"], params.node)
    _accumulate(grads, "node.", gp)
    if g_lidar is not None:
        _accumulate(grads, "lidar.", lidar_bev_backward(g_lidar, cache["lidar"], params.lidar))
    if g_cam is not None:
        _accumulate(grads, "camera.", camera_bev_backward(g_cam, cache["camera"], params.camera))


def _accumulate(grads: dict, prefix: str, new: dict):
    for k, v in new.items():
        key = prefix + k
        grads[key] = grads[key] + v if key in grads else v


def backward(out: ForwardOutput, grad_logits, grad_reg, params: ModelParams) -> dict:
    """Gradients for every trainable parameter (zeros where unused)."""
    grads = {}
    f_final = out.fused.f_final
    g1, gw, gb = T.conv2d_backward(grad_logits, f_final, params.head.cls)
    grads["head.cls.weight"], grads["head.cls.bias"] = gw, gb
    g2, gw, gb = T.conv2d_backward(grad_reg, f_final, params.head.reg)
    grads["head.reg.weight"], grads["head.reg.bias"] = gw, gb
    g_v, g_i, gh = asr_backward(g1 + g2, out.cache["asr"], params.haf)
    _accumulate(grads, "haf.", gh)
    for role, g in (("vehicle", g_v), ("infra", g_i)):
        s, cache = out.cache[role]
        _node_backward(g, s, cache, params, grads)
    for k, v in params.trainable().items():
        if k not in grads:
            grads[k] = np.zeros_like(v)
    return grads


@dataclass
class Targets:
    labels: np.ndarray  # (h, w) int, 0 = background
    reg: np.ndarray  # (6, h, w)
    positive: np.ndarray  # (h, w) bool, classification positives
    reg_mask: np.ndarray = None  # (h, w) bool, cells supervised by the box loss


def _box_targets(o: OrientedBox3D, cx: float, cy: float, size: float) -> list:
    return [(o.center[0] - cx) / size, (o.center[1] - cy) / size,
            math.log(o.size[0]), math.log(o.size[1]), math.sin(o.yaw), math.cos(o.yaw)]


def build_targets(objects, grid: BevGridSpec, scale: int) -> Targets:
    """Classification: one positive per object, the head cell holding its center.

    Box regression is supervised on every head cell whose center falls inside
    the object footprint, each regressing the offset to the object center.
    """
    h, w = grid.height // scale, grid.width // scale
    size = grid.cell_size * scale
    labels = np.zeros((h, w), dtype=np.int64)
    reg = np.zeros((REG_CHANNELS, h, w))
    reg_mask = np.zeros((h, w), dtype=bool)
    xs = grid.x_range[0] + (np.arange(w) + 0.5) * size
    ys = grid.y_range[0] + (np.arange(h) + 0.5) * size
    gx, gy = np.meshgrid(xs, ys)
    centers = []
    for o in objects:
        col = int(math.floor((o.center[0] - grid.x_range[0]) / size))
        row = int(math.floor((o.center[1] - grid.y_range[0]) / size))
        if not (0 <= row < h and 0 <= col < w):
            continue
        c, s = math.cos(o.yaw), math.sin(o.yaw)
        dx, dy = gx - o.center[0], gy - o.center[1]
        inside = (np.abs(c * dx + s * dy) <= o.size[0] / 2) & (np.abs(-s * dx + c * dy) <= o.size[1] / 2)
        for r, q in zip(*np.nonzero(inside)):
            reg[:, r, q] = _box_targets(o, xs[q], ys[r], size)
        reg_mask |= inside
        centers.append((o, row, col))
    # center cells last so an object always owns its own center
    for o, row, col in centers:
        labels[row, col] = o.class_id + 1
        reg[:, row, col] = _box_targets(o, xs[col], ys[row], size)
        reg_mask[row, col] = True
    return Targets(labels, reg, labels > 0, reg_mask)


def detection_loss(out: ForwardOutput, targets: Targets):
    """Focal classification + smooth-L1 box loss.  Returns (loss, grad_logits, grad_reg)."""
    logits = out.cls_logits[0].astype(np.float64)  # (K+1, h, w)
    k1 = logits.shape[0]
    z = logits - logits.max(axis=0, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=0, keepdims=True)
    onehot = np.eye(k1)[targets.labels].transpose(2, 0, 1)
    pt = np.clip((p * onehot).sum(axis=0), 1e-12, 1.0)
    n_pos = max(int(targets.positive.sum()), 1)
    mod = (1 - pt) ** FOCAL_GAMMA
    cls_loss = float((-mod * np.log(pt)).sum()) / n_pos
    d_pt = (FOCAL_GAMMA * (1 - pt) ** (FOCAL_GAMMA - 1) * np.log(pt) - mod / pt) / n_pos
    grad_logits = d_pt[None] * pt[None] * (onehot - p)

    reg = out.reg[0].astype(np.float64)
    mask = targets.positive if targets.reg_mask is None else targets.reg_mask
    n_reg = max(int(mask.sum()), 1)
    diff = (reg - targets.reg) * mask[None]
    ad = np.abs(diff)
    quad = ad < SMOOTH_L1_BETA
    box_loss = float(np.where(quad, 0.5 * diff ** 2 / SMOOTH_L1_BETA, ad - 0.5 * SMOOTH_L1_BETA).sum())
    box_loss = BOX_WEIGHT * box_loss / n_reg
    grad_reg = BOX_WEIGHT * np.where(quad, diff / SMOOTH_L1_BETA, np.sign(diff)) / n_reg

    dtype = out.cls_logits.dtype
    return cls_loss + box_loss, grad_logits[None].astype(dtype), grad_reg[None].astype(dtype)


def _local_max(score: np.ndarray) -> np.ndarray:
    padded = np.pad(score, 1, constant_values=-np.inf)
    h, w = score.shape
    neigh = np.stack([padded[i: i + h, j: j + w] for i in range(3) for j in range(3)])
    return score >= neigh.max(axis=0)


def decode_detections(out: ForwardOutput, grid: BevGridSpec, min_score: float = MIN_SCORE) -> list:
    """Per-cell class argmax over foreground classes, 3x3 local-max suppression."""
    logits = out.cls_logits[0].astype(np.float64)
    z = logits - logits.max(axis=0, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=0, keepdims=True)
    fg = p[1:]
    cls = fg.argmax(axis=0)
    score = fg.max(axis=0)
    keep = _local_max(score) & (score >= min_score)
    size = grid.cell_size * out.scale
    reg = out.reg[0].astype(np.float64)
    boxes = []
    for row, col in zip(*np.nonzero(keep)):
        k = int(cls[row, col])
        cx, cy = grid.cell_center(row, col, out.scale)
        dx, dy, ll, lw, s, c = reg[:, row, col]
        height = float(SIZE_PRIORS[k][2])
        length = float(np.exp(np.clip(ll, -3.0, 4.0)))
        width = float(np.exp(np.clip(lw, -3.0, 4.0)))
        yaw = wrap_angle(math.atan2(s, c)) if (s or c) else 0.0
        boxes.append(OrientedBox3D((cx + dx * size, cy + dy * size, height / 2), (length, width, height),
                                   yaw, k, float(score[row, col])))
    boxes.sort(key=lambda b: -b.score)
    return boxes
