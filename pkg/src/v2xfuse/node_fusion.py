"""Per-node feature preparation: dual-sensor fusion, single-sensor adapters, fallback."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .encoders import C_BEV, conv_arrays, init_conv
from .errors import ContractError, ShapeError

C_OUT = C_BEV


@dataclass(frozen=True)
class SensorSet:
    has_lidar: bool = False
    has_camera: bool = False

    @property
    def size(self) -> int:
        return int(self.has_lidar) + int(self.has_camera)

    @property
    def code(self) -> int:
        """Bit 0 lidar, bit 1 camera."""
        return int(self.has_lidar) | (int(self.has_camera) << 1)

    @classmethod
    def from_code(cls, code: int) -> "SensorSet":
        return cls(bool(code & 1), bool(code & 2))

    @property
    def token(self) -> str:
        return ("L" if self.has_lidar else "") + ("C" if self.has_camera else "") or "-"

    @classmethod
    def parse(cls, token: str) -> "SensorSet":
        t = token.strip().upper()
        if t in ("", "-"):
            return cls()
        if set(t) - {"L", "C"} or len(set(t)) != len(t):
            raise ValueError(f"invalid sensor token {token!r}")
        return cls("L" in t, "C" in t)


ALL_SENSOR_SETS = tuple(SensorSet.from_code(c) for c in range(4))


@dataclass
class NormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def identity(cls, c: int, dtype=np.float32) -> "NormParams":
        return cls(np.ones(c, dtype), np.zeros(c, dtype), np.zeros(c, dtype), np.ones(c, dtype))

    def apply(self, x):
        return T.affine_norm(x, self.gamma, self.beta, self.running_mean, self.running_var)

    def arrays(self, prefix: str) -> dict:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta,
                f"{prefix}.running_mean": self.running_mean, f"{prefix}.running_var": self.running_var}


@dataclass
class NodeFusionParams:
    fuse_conv: T.ConvParams  # 2*C_bev -> C_out, 1x1
    fuse_norm: NormParams
    lidar_adapter: T.ConvParams  # C_bev -> C_out, 1x1
    lidar_norm: NormParams
    camera_adapter: T.ConvParams
    camera_norm: NormParams
    fallback_value: float = 0.0

    @classmethod
    def init(cls, rng, c_bev: int = C_BEV, c_out: int = C_OUT) -> "NodeFusionParams":
        return cls(
            init_conv(rng, c_out, 2 * c_bev), NormParams.identity(c_out),
            init_conv(rng, c_out, c_bev), NormParams.identity(c_out),
            init_conv(rng, c_out, c_bev), NormParams.identity(c_out),
        )

    def arrays(self) -> dict:
        return {
            **conv_arrays(self.fuse_conv, "fuse_conv"), **self.fuse_norm.arrays("fuse_norm"),
            **conv_arrays(self.lidar_adapter, "lidar_adapter"), **self.lidar_norm.arrays("lidar_norm"),
            **conv_arrays(self.camera_adapter, "camera_adapter"), **self.camera_norm.arrays("camera_norm"),
        }

    def path(self, name: str):
        return {"fuse": (self.fuse_conv, self.fuse_norm),
                "lidar": (self.lidar_adapter, self.lidar_norm),
                "camera": (self.camera_adapter, self.camera_norm)}[name]


def _conv_norm_act(x, conv, norm):
    z = T.conv2d(x, conv)
    n = norm.apply(z)
    return T.relu(n), (x, z, n)


_PATH_KEYS = {
    "fuse": ("fuse_conv", "fuse_norm"),
    "lidar": ("lidar_adapter", "lidar_norm"),
    "camera": ("camera_adapter", "camera_norm"),
}


def _conv_norm_act_backward(grad, cache, conv, norm, name):
    x, z, n = cache
    g = T.relu_backward(grad, n)
    g, ggamma, gbeta = T.affine_norm_backward(g, z, norm.gamma, norm.running_mean, norm.running_var)
    gx, gw, gb = T.conv2d_backward(g, x, conv)
    ck, nk = _PATH_KEYS[name]
    return gx, {f"{ck}.weight": gw, f"{ck}.bias": gb, f"{nk}.gamma": ggamma, f"{nk}.beta": gbeta}


def bev_fusion(f_cam, f_lidar, p: NodeFusionParams) -> np.ndarray:
    """concat(camera, lidar) -> 1x1 conv -> norm -> relu."""
    if np.shape(f_cam) != np.shape(f_lidar):
        raise ShapeError(f"camera {np.shape(f_cam)} and lidar {np.shape(f_lidar)} maps differ")
    return _conv_norm_act(T.concat_channels(f_cam, f_lidar), p.fuse_conv, p.fuse_norm)[0]


def pseudo_fusion(f: Optional[np.ndarray], s: "SensorSet", p: NodeFusionParams, shape) -> np.ndarray:
    """Adapter path for single-sensor nodes, constant fallback for sensorless ones."""
    if s.size == 0:
        return np.full(shape, p.fallback_value, dtype=np.float32)
    if s.size != 1:
        raise ContractError("pseudo_fusion handles at most one sensor")
    if f is None:
        raise ContractError(f"sensor {s.token} flagged but its feature map is missing")
    conv, norm = p.path("lidar" if s.has_lidar else "camera")
    return _conv_norm_act(f, conv, norm)[0]


def node_features_forward(s: SensorSet, f_cam, f_lidar, p: NodeFusionParams, shape):
    if (f_cam is not None) != s.has_camera or (f_lidar is not None) != s.has_lidar:
        raise ContractError(f"encoder outputs do not match sensor set {s.token}")
    if s.size == 2:
        if np.shape(f_cam) != np.shape(f_lidar):
            raise ShapeError("camera and lidar maps differ in shape")
        out, cache = _conv_norm_act(T.concat_channels(f_cam, f_lidar), p.fuse_conv, p.fuse_norm)
        return out, ("fuse", cache)
    if s.size == 1:
        name = "lidar" if s.has_lidar else "camera"
        conv, norm = p.path(name)
        out, cache = _conv_norm_act(f_lidar if s.has_lidar else f_cam, conv, norm)
        return out, (name, cache)
    return pseudo_fusion(None, s, p, shape), ("fallback", None)


def node_features(s: SensorSet, f_cam, f_lidar, p: NodeFusionParams, shape) -> np.ndarray:
    """Dispatch on |S_n|: 2 -> bev_fusion, 1 -> adapter, 0 -> fallback."""
    return node_features_forward(s, f_cam, f_lidar, p, shape)[0]


def node_features_backward(grad, cache, p: NodeFusionParams):
    """Returns (grad_cam, grad_lidar, param grads)."""
    name, inner = cache
    if name == "fallback":
        return None, None, {}
    conv, norm = p.path(name)
    gx, grads = _conv_norm_act_backward(grad, inner, conv, norm, name)
    if name == "fuse":
        c = gx.shape[1] // 2
        return gx[:, :c], gx[:, c:], grads
    if name == "lidar":
        return None, gx, grads
    return gx, None, grads
