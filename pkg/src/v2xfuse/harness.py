"""Orchestration: configuration registry, scenarios, run/train loops, MAC estimator."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .checkpoint import TrainState
from .coop_fusion import AsrPolicy, select_scale
from .encoders import DepthBins, lift_geometry, voxelize
from .errors import ConfigError, TrainingError
from .geometry import BevGridSpec, CameraIntrinsics, Pose, camera_pose, sensor_pose
from .model import NodeObservation, backward, build_targets, decode_detections, detection_loss, forward
from .node_fusion import SensorSet
from .scenegen import Scene, generate_scene, simulate_camera, simulate_lidar

log = logging.getLogger(__name__)

ROLES = ("vehicle", "infra")

DEFAULT_CONFIG = {
    "grid": {"x_range": [-16.0, 16.0], "y_range": [-16.0, 16.0], "cell_size": 1.0},
    "policy": {"s_high": 4, "s_medium": 2, "s_low": 1},
    "camera": {"width": 64, "height": 48, "fx": 32.0, "fy": 32.0},
    "nodes": {
        "vehicle": {"position": [-14.0, 0.0], "lidar_height": 1.9, "camera_height": 1.6,
                    "yaw": 0.0, "pitch": 0.12, "keep_out": 3.0},
        "infra": {"position": [14.0, 14.0], "lidar_height": 6.5, "camera_height": 6.5,
                  "yaw": -2.356194490192345, "pitch": 0.3, "keep_out": 3.0},
    },
    "lidar": {"rays_per_object": 64, "noise_sigma": 0.02},
    "scenes": {"count": 200, "seed": 7, "min_objects": 3, "max_objects": 8},
    "model": {"c_bev": 16, "depth_bins": 8, "init_seed": 0},
    "train": {"epochs": 20, "lr": 0.01, "momentum": 0.9, "grad_clip": 5.0, "seed": 0},
    "eval": {"iou_threshold": 0.5, "score_threshold": 0.3},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path + k!r} must be a mapping")
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


@dataclass(frozen=True)
class NodeRig:
    lidar_pose: Pose
    camera_pose: Pose
    intrinsics: CameraIntrinsics

    def to_dict(self) -> dict:
        return {"lidar_pose": self.lidar_pose.to_dict(), "camera_pose": self.camera_pose.to_dict(),
                "intrinsics": self.intrinsics.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "NodeRig":
        return cls(Pose.from_dict(d["lidar_pose"]), Pose.from_dict(d["camera_pose"]),
                   CameraIntrinsics.from_dict(d["intrinsics"]))


class Config:
    """Run configuration; every default is explicit in ``DEFAULT_CONFIG``."""

    def __init__(self, overrides: Optional[dict] = None):
        self.raw = _merge(DEFAULT_CONFIG, overrides or {})
        try:
            self.grid = BevGridSpec(tuple(self.raw["grid"]["x_range"]), tuple(self.raw["grid"]["y_range"]),
                                    float(self.raw["grid"]["cell_size"]))
            self.policy = AsrPolicy(**{k: int(v) for k, v in self.raw["policy"].items()})
            self.policy.check_grid(*self.grid.shape)
            self.rigs = {role: self._rig(role) for role in ROLES}
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        sc = self.raw["scenes"]
        if not 1 <= sc["min_objects"] <= sc["max_objects"] or sc["count"] < 0:
            raise ConfigError("invalid scene counts")

    def _rig(self, role: str) -> NodeRig:
        n, cam = self.raw["nodes"][role], self.raw["camera"]
        x, y = n["position"]
        K = CameraIntrinsics(cam["fx"], cam["fy"], cam["width"] / 2, cam["height"] / 2,
                             int(cam["width"]), int(cam["height"]))
        return NodeRig(sensor_pose((x, y, n["lidar_height"]), n["yaw"]),
                       camera_pose((x, y, n["camera_height"]), n["yaw"], n["pitch"]), K)

    @property
    def keep_out(self) -> list:
        return [(*self.raw["nodes"][r]["position"], self.raw["nodes"][r]["keep_out"]) for r in ROLES]

    @classmethod
    def load(cls, path) -> "Config":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls(data)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


@dataclass(frozen=True)
class ScenarioConfig:
    vehicle: SensorSet
    infra: SensorSet

    @property
    def token(self) -> str:
        return f"{self.vehicle.token}+{self.infra.token}".lower()

    @property
    def heterogeneous(self) -> bool:
        """Anything other than the full LC+LC arrangement."""
        return self.token != "lc+lc"


REGISTRY = tuple(
    ScenarioConfig(SensorSet.parse(v), SensorSet.parse(i))
    for v, i in (("LC", "LC"), ("L", "L"), ("C", "C"), ("L", "C"), ("C", "L"),
                 ("LC", "C"), ("LC", "L"), ("C", "LC"), ("L", "LC"))
)
TOKENS = tuple(c.token for c in REGISTRY)


def parse_configs(text: str) -> list:
    """Comma-separated tokens (or 'all') -> registry entries, in the given order."""
    if text.strip().lower() == "all":
        return list(REGISTRY)
    out = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        if tok not in TOKENS:
            raise ConfigError(f"unknown configuration {tok!r}; valid: {', '.join(TOKENS)}")
        out.append(REGISTRY[TOKENS.index(tok)])
    return out


def sample_config(rng: np.random.Generator) -> ScenarioConfig:
    return REGISTRY[int(rng.integers(len(REGISTRY)))]


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class Scenario:
    scene: Scene
    rigs: dict  # role -> NodeRig
    rays_per_object: int = 64
    lidar_noise: float = 0.02

    def to_dict(self) -> dict:
        return {"format": "v2xfuse-scenario", "version": 1, **self.scene.to_dict(),
                "nodes": {r: self.rigs[r].to_dict() for r in ROLES},
                "lidar": {"rays_per_object": self.rays_per_object, "noise_sigma": self.lidar_noise}}

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if d.get("format") != "v2xfuse-scenario":
            raise ConfigError("not a scenario file")
        return cls(Scene.from_dict(d), {r: NodeRig.from_dict(d["nodes"][r]) for r in ROLES},
                   int(d["lidar"]["rays_per_object"]), float(d["lidar"]["noise_sigma"]))


def make_scenario(cfg: Config, seed: int, n_objects: Optional[int] = None) -> Scenario:
    sc = cfg.raw["scenes"]
    if n_objects is None:
        n_objects = int(np.random.default_rng(_derive_seed(seed, 99)).integers(
            sc["min_objects"], sc["max_objects"] + 1))
    scene = generate_scene(seed, n_objects, cfg.grid, cfg.keep_out)
    return Scenario(scene, dict(cfg.rigs), int(cfg.raw["lidar"]["rays_per_object"]),
                    float(cfg.raw["lidar"]["noise_sigma"]))


def scenario_seeds(base_seed: int, count: int, offset: int = 0) -> list:
    return [_derive_seed(base_seed, offset + i) % (2 ** 63) for i in range(count)]


_LIFT_CACHE: dict = {}


def _lift(rig: NodeRig, bins: DepthBins, grid: BevGridSpec):
    key = (rig.camera_pose.rotation.tobytes(), rig.camera_pose.translation.tobytes(),
           repr(rig.intrinsics), bins.centers, repr(grid))
    if key not in _LIFT_CACHE:
        _LIFT_CACHE[key] = lift_geometry(rig.intrinsics, rig.camera_pose, bins, grid)
    return _LIFT_CACHE[key]


def observe(scenario: Scenario, depth_bins: int = 8) -> dict:
    """Simulate both sensors on both nodes; a configuration later picks a subset."""
    grid = scenario.scene.grid
    bins = DepthBins.uniform(grid, depth_bins)
    obs = {}
    for k, role in enumerate(ROLES):
        rig = scenario.rigs[role]
        pc = simulate_lidar(scenario.scene, rig.lidar_pose, scenario.rays_per_object,
                            scenario.lidar_noise, _derive_seed(scenario.scene.seed, k, 0))
        img = simulate_camera(scenario.scene, rig.intrinsics, rig.camera_pose,
                              _derive_seed(scenario.scene.seed, k, 1))
        obs[role] = NodeObservation(voxelize(pc, grid), img, _lift(rig, bins, grid))
    return obs


def run_scenario(scenario: Scenario, cfg: ScenarioConfig, model: TrainState, policy: AsrPolicy,
                 obs: Optional[dict] = None, min_score: float = 0.05):
    """Detections and fusion snapshot for one scene under one sensor configuration."""
    if obs is None:
        obs = observe(scenario, model.meta.get("depth_bins", 8))
    out = forward(model.params, obs, cfg.vehicle, cfg.infra, policy, scenario.scene.grid)
    return decode_detections(out, scenario.scene.grid, min_score), out.fused


def scenario_loss(state: TrainState, scenario: Scenario, obs: dict, cfg: ScenarioConfig,
                  policy: AsrPolicy, with_grads: bool = False):
    grid = scenario.scene.grid
    out = forward(state.params, obs, cfg.vehicle, cfg.infra, policy, grid)
    targets = build_targets(scenario.scene.objects, grid, out.scale)
    loss, g_logits, g_reg = detection_loss(out, targets)
    if not with_grads:
        return loss, None
    return loss, backward(out, g_logits, g_reg, state.params)


def validation_loss(state: TrainState, scenarios, observations, policy: AsrPolicy) -> float:
    """Mean loss with scene i evaluated under registry entry i mod 9."""
    losses = [scenario_loss(state, s, o, REGISTRY[i % len(REGISTRY)], policy)[0]
              for i, (s, o) in enumerate(zip(scenarios, observations))]
    return float(np.mean(losses))


def sgd_step(state: TrainState, grads: dict, lr: float, momentum: float, clip: float):
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    factor = min(1.0, clip / norm) if clip > 0 and norm > 0 else 1.0
    for name, param in state.params.trainable().items():
        buf = state.momentum[name]
        buf *= momentum
        buf += (grads[name] * factor).astype(np.float32)
        param -= np.float32(lr) * buf


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1 + math.cos(math.pi * min(step, total) / total))


def train(state: TrainState, scenarios, epochs: int, cfg: Config, observations=None,
          on_step: Optional[Callable] = None, on_epoch: Optional[Callable] = None) -> TrainState:
    """Momentum SGD with cosine decay, one random configuration per step.

    Scene order and configuration draws are pure functions of (seed, epoch,
    step), so training resumes exactly from any saved step.
    """
    tc = cfg.raw["train"]
    n = len(scenarios)
    total = epochs * n
    if observations is None:
        observations = [observe(s, state.meta.get("depth_bins", 8)) for s in scenarios]
    while state.step < total:
        epoch, pos = divmod(state.step, n)
        order = np.random.default_rng([state.seed, epoch, 1]).permutation(n)
        idx = int(order[pos])
        scenario_cfg = sample_config(np.random.default_rng([state.seed, state.step, 2]))
        loss, grads = scenario_loss(state, scenarios[idx], observations[idx], scenario_cfg,
                                    cfg.policy, with_grads=True)
        if not math.isfinite(loss):
            raise TrainingError("loss is not finite", state.step)
        lr = cosine_lr(float(tc["lr"]), state.step, total)
        sgd_step(state, grads, lr, float(tc["momentum"]), float(tc["grad_clip"]))
        state.step += 1
        if on_step is not None:
            on_step(state.step, epoch, idx, scenario_cfg, loss, lr)
        if state.step % n == 0 and on_epoch is not None:
            on_epoch(state.step // n, state)
    return state


@dataclass(frozen=True)
class FlopsReport:
    config: str
    macs_with_asr: int
    macs_without_asr: int

    @property
    def reduction(self) -> float:
        return 1.0 - self.macs_with_asr / self.macs_without_asr


def _fusion_macs(h: int, w: int, c: int, sv: int, si: int) -> int:
    hidden = max(c // 2, 1)
    common, fine = max(sv, si), min(sv, si)
    n_common = (h // common) * (w // common)
    # spatial attention: conv1 (C -> C/2, 3x3) and conv2 (C/2 -> 1, 3x3) per node
    attention = 2 * n_common * 9 * (hidden * c + hidden)
    # (F_v * alpha) * A_v + (F_i * (1 - alpha)) * A_i: four multiply-accumulates per element
    elementwise = 4 * c * n_common
    pooling = 0
    for s in (sv, si):
        if s > 1:
            pooling += c * h * w  # full grid -> node grid
        if common > s:
            pooling += c * (h // s) * (w // s)  # node grid -> common grid
    upsample = 4 * c * (h // fine) * (w // fine) if common > fine else 0
    return attention + elementwise + pooling + upsample


def estimate_fusion_flops(cfg: ScenarioConfig, policy: AsrPolicy, h: int, w: int, c: int = 16) -> FlopsReport:
    """Analytic fusion-stage MAC counts with and without adaptive resolution."""
    policy.check_grid(h, w)
    sv, si = select_scale(cfg.vehicle, policy), select_scale(cfg.infra, policy)
    return FlopsReport(cfg.token, _fusion_macs(h, w, c, sv, si), _fusion_macs(h, w, c, 1, 1))


def mean_heterogeneous_reduction(policy: AsrPolicy, h: int, w: int, c: int = 16) -> float:
    reps = [estimate_fusion_flops(cfg, policy, h, w, c) for cfg in REGISTRY if cfg.heterogeneous]
    return float(np.mean([r.reduction for r in reps]))
