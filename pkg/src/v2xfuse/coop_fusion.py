"""Inter-node fusion: hierarchical channel/spatial attention with adaptive resolution.

The fused map is

    (F_v * alpha) * A_v + (F_i * (1 - alpha)) * A_i

with ``alpha = sigmoid(w_channel)`` a learned per-channel constant and
``A_n = sigmoid(conv2(relu(conv1(F_n))))`` a per-node spatial map.  Around it,
each node's map is average-pooled by a sensor-dependent divisor, both are
brought to the coarser of the two grids, fused, and bilinearly upsampled to
the finer node's grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import conv_arrays, init_conv
from .errors import ConfigError, ContractError, ShapeError
from .node_fusion import SensorSet

ROLES = ("vehicle", "infra")


@dataclass
class SpatialAttentionParams:
    conv1: T.ConvParams  # C -> C/2, 3x3, padding 1
    conv2: T.ConvParams  # C/2 -> 1, 3x3, padding 1


@dataclass
class HafParams:
    w_channel: np.ndarray  # (1, C, 1, 1) raw logits
    spatial: dict  # role -> SpatialAttentionParams

    @classmethod
    def init(cls, rng, c: int) -> "HafParams":
        hidden = max(c // 2, 1)
        spatial = {
            role: SpatialAttentionParams(init_conv(rng, hidden, c, 3, 1), init_conv(rng, 1, hidden, 3, 1, scale=0.1))
            for role in ROLES
        }
        return cls(np.zeros((1, c, 1, 1), dtype=np.float32), spatial)

    @property
    def channels(self) -> int:
        return self.w_channel.shape[1]

    def arrays(self) -> dict:
        out = {"w_channel": self.w_channel}
        for role in ROLES:
            sp = self.spatial[role]
            out.update(conv_arrays(sp.conv1, f"{role}.conv1"))
            out.update(conv_arrays(sp.conv2, f"{role}.conv2"))
        return out


@dataclass(frozen=True)
class AsrPolicy:
    s_high: int = 4
    s_medium: int = 2
    s_low: int = 1

    def __post_init__(self):
        if not (self.s_high >= self.s_medium >= self.s_low >= 1):
            raise ConfigError(f"need s_high >= s_medium >= s_low >= 1, got {self}")

    def check_grid(self, h: int, w: int):
        if h % self.s_high or w % self.s_high:
            raise ConfigError(f"grid {h}x{w} is not divisible by s_high={self.s_high}")


@dataclass
class FusedResult:
    f_final: np.ndarray
    alpha_snapshot: np.ndarray
    attention_maps: dict = field(default_factory=dict)
    scales_used: tuple = (1, 1)


def channel_attention(p: HafParams) -> np.ndarray:
    return T.sigmoid(p.w_channel)


def channel_fuse(f_v, f_i, alpha) -> np.ndarray:
    """Per-channel convex combination alpha * f_v + (1 - alpha) * f_i."""
    if np.shape(f_v) != np.shape(f_i):
        raise ShapeError(f"vehicle {np.shape(f_v)} and infra {np.shape(f_i)} maps differ")
    return T.hadamard(f_v, alpha) + T.hadamard(f_i, 1 - alpha)


def _spatial_forward(f, sp: SpatialAttentionParams):
    f = T.as_tensor(f)
    if f.shape[1] != sp.conv1.in_channels:
        raise ShapeError(f"feature has {f.shape[1]} channels, attention expects {sp.conv1.in_channels}")
    z1 = T.conv2d(f, sp.conv1)
    h1 = T.relu(z1)
    z2 = T.conv2d(h1, sp.conv2)
    return T.sigmoid(z2), (f, z1, h1)


def spatial_attention(f, role: str, p: HafParams) -> np.ndarray:
    return _spatial_forward(f, p.spatial[role])[0]


def haf_forward(f_v, f_i, p: HafParams):
    f_v, f_i = T.as_tensor(f_v), T.as_tensor(f_i)
    if f_v.shape != f_i.shape:
        raise ShapeError(f"vehicle {f_v.shape} and infra {f_i.shape} maps differ")
    alpha = channel_attention(p)
    a_v, cache_v = _spatial_forward(f_v, p.spatial["vehicle"])
    a_i, cache_i = _spatial_forward(f_i, p.spatial["infra"])
    fused = T.hadamard(T.hadamard(f_v, alpha), a_v) + T.hadamard(T.hadamard(f_i, 1 - alpha), a_i)
    cache = {"f_v": f_v, "f_i": f_i, "alpha": alpha, "a_v": a_v, "a_i": a_i,
             "spatial": {"vehicle": cache_v, "infra": cache_i}}
    return fused, cache


def haf_fuse(f_v, f_i, p: HafParams):
    """Returns (fused map, alpha, {role: attention map})."""
    fused, c = haf_forward(f_v, f_i, p)
    return fused, c["alpha"], {"vehicle": c["a_v"], "infra": c["a_i"]}


def haf_backward(grad, cache, p: HafParams):
    """Returns (grad_f_v, grad_f_i, param grads keyed like ``HafParams.arrays``)."""
    if not cache:
        raise ContractError("haf_backward needs the cache of a forward pass")
    g = np.asarray(grad, dtype=np.float64)
    f_v, f_i = cache["f_v"].astype(np.float64), cache["f_i"].astype(np.float64)
    alpha = cache["alpha"].astype(np.float64)
    a_v, a_i = cache["a_v"].astype(np.float64), cache["a_i"].astype(np.float64)
    dtype = cache["f_v"].dtype

    grad_f = {"vehicle": g * alpha * a_v, "infra": g * (1 - alpha) * a_i}
    grad_a = {"vehicle": (g * f_v * alpha).sum(axis=1, keepdims=True),
              "infra": (g * f_i * (1 - alpha)).sum(axis=1, keepdims=True)}
    grad_alpha = (g * (f_v * a_v - f_i * a_i)).sum(axis=(0, 2, 3), keepdims=True)
    grads = {"w_channel": (grad_alpha * alpha * (1 - alpha)).astype(dtype)}

    for role, amap in (("vehicle", a_v), ("infra", a_i)):
        sp = p.spatial[role]
        f, z1, h1 = cache["spatial"][role]
        gz2 = (grad_a[role] * amap * (1 - amap)).astype(dtype)
        gh1, gw2, gb2 = T.conv2d_backward(gz2, h1, sp.conv2)
        gz1 = T.relu_backward(gh1, z1)
        gf, gw1, gb1 = T.conv2d_backward(gz1, f, sp.conv1)
        grad_f[role] = grad_f[role] + gf
        grads.update({f"{role}.conv1.weight": gw1, f"{role}.conv1.bias": gb1,
                      f"{role}.conv2.weight": gw2, f"{role}.conv2.bias": gb2})
    return grad_f["vehicle"].astype(dtype), grad_f["infra"].astype(dtype), grads


def select_scale(s: SensorSet, policy: AsrPolicy) -> int:
    if s.has_lidar and s.has_camera:
        return policy.s_medium
    if s.has_lidar:
        return policy.s_low
    # camera-only, and sensorless nodes whose fallback carries no detail
    return policy.s_high


def asr_forward(f_v, f_i, s_v: SensorSet, s_i: SensorSet, p: HafParams, policy: AsrPolicy):
    f_v, f_i = T.as_tensor(f_v), T.as_tensor(f_i)
    if f_v.shape != f_i.shape:
        raise ShapeError(f"vehicle {f_v.shape} and infra {f_i.shape} maps differ")
    _, _, h, w = f_v.shape
    policy.check_grid(h, w)
    sv, si = select_scale(s_v, policy), select_scale(s_i, policy)
    common, fine = max(sv, si), min(sv, si)
    pooled = []
    for f, s in ((f_v, sv), (f_i, si)):
        down = T.adaptive_avg_pool(f, h // s, w // s)
        pooled.append(T.adaptive_avg_pool(down, h // common, w // common))
    fused, haf_cache = haf_forward(pooled[0], pooled[1], p)
    final = T.bilinear_upsample(fused, h // fine, w // fine)
    result = FusedResult(final, haf_cache["alpha"], {"vehicle": haf_cache["a_v"], "infra": haf_cache["a_i"]},
                         (sv, si))
    cache = {"haf": haf_cache, "shape": (h, w), "scales": (sv, si), "common": common}
    return result, cache


def asr_fuse(f_v, f_i, s_v: SensorSet, s_i: SensorSet, p: HafParams, policy: AsrPolicy) -> FusedResult:
    """Pool per node, fuse on the coarser common grid, upsample to the finer node grid."""
    return asr_forward(f_v, f_i, s_v, s_i, p, policy)[0]


def asr_backward(grad, cache, p: HafParams):
    h, w = cache["shape"]
    common = cache["common"]
    g = T.bilinear_upsample_backward(grad, h // common, w // common)
    g_v, g_i, grads = haf_backward(g, cache["haf"], p)
    out = []
    for gn, s in ((g_v, cache["scales"][0]), (g_i, cache["scales"][1])):
        gn = T.adaptive_avg_pool_backward(gn, h // s, w // s)
        out.append(T.adaptive_avg_pool_backward(gn, h, w))
    return out[0], out[1], grads
