"""Scenario configuration (JSON) with unit-suffixed field names."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .classifier import SIMULATION_SQRT_INFO, ConstantModel, SimulationModel, ViewpointModel, load_lookup_model
from .errors import ConfigurationError, LoadError
from .geometry import Pose2, between, validate_covariance

BUNDLED = ("desk", "fullscale", "ambiguity", "timestamps")


@dataclass(frozen=True)
class RobotSpec:
    id: int
    initial_pose: Pose2
    controls: Tuple[Pose2, ...]


@dataclass(frozen=True)
class ObjectSpec:
    id: int
    pose: Pose2
    true_class: int


@dataclass
class ScenarioConfig:
    name: str
    num_classes: int
    steps: int
    robots: List[RobotSpec]
    objects: List[ObjectSpec]
    motion_cov: np.ndarray
    geometric_cov: np.ndarray
    initial_pose_cov: np.ndarray
    classifier: dict
    sensing_range_m: float = 10.0
    communication_range_m: float = 10.0
    prune_ratio: float = 0.01
    n_samples: int = 100
    seed: int = 0
    object_prior_sigma: float = 1e3
    class_prior: Optional[np.ndarray] = None
    max_gn_iters: int = 100
    gn_tol: float = 1e-9
    base_dir: Optional[Path] = None
    raw: dict = field(default_factory=dict, repr=False)

    # -- construction ---------------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "ScenarioConfig":
        try:
            return cls._from_dict(d, base_dir)
        except ConfigurationError:
            raise
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ConfigurationError(f"invalid scenario: {type(exc).__name__}: {exc}") from exc

    @classmethod
    def _from_dict(cls, d, base_dir):
        steps = int(d["steps"])
        robots = [_robot_from_dict(r, steps) for r in d["robots"]]
        objects = [
            ObjectSpec(int(o["id"]), Pose2(*o["pose_m_m_rad"]), int(o["class"])) for o in d.get("objects", [])
        ]
        cp = d.get("class_prior")
        cfg = cls(
            name=str(d.get("name", "scenario")),
            num_classes=int(d.get("num_classes", 2)),
            steps=steps,
            robots=robots,
            objects=objects,
            motion_cov=np.diag(d["motion_noise_cov_diag_m2_m2_rad2"]).astype(float),
            geometric_cov=np.diag(d["geometric_noise_cov_diag_m2_m2_rad2"]).astype(float),
            initial_pose_cov=np.diag(d.get("initial_pose_cov_diag_m2_m2_rad2", [1e-4, 1e-4, 1e-5])).astype(float),
            classifier=dict(d.get("classifier", {"type": "simulation"})),
            sensing_range_m=float(d.get("sensing_range_m", 10.0)),
            communication_range_m=float(d.get("communication_range_m", 10.0)),
            prune_ratio=float(d.get("prune_ratio", 0.01)),
            n_samples=int(d.get("n_samples", 100)),
            seed=int(d.get("seed", 0)),
            object_prior_sigma=float(d.get("object_prior_sigma_m", 1e3)),
            class_prior=None if cp is None else np.asarray(cp, dtype=float),
            max_gn_iters=int(d.get("max_gn_iters", 100)),
            gn_tol=float(d.get("gn_tol", 1e-9)),
            base_dir=base_dir,
            raw=d,
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read scenario file {path}: {exc.strerror or exc}") from exc
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"scenario file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(d, base_dir=path.parent)

    @classmethod
    def bundled(cls, name: str) -> "ScenarioConfig":
        if name not in BUNDLED:
            raise ConfigurationError(f"unknown bundled scenario {name!r}; choose from {', '.join(BUNDLED)}")
        ref = resources.files("hybrid_ddf").joinpath("scenarios", f"{name}.json")
        with resources.as_file(ref) as p:
            return cls.load(p)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if not self.robots:
            raise ConfigurationError("at least one robot is required")
        ids = [r.id for r in self.robots]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("robot IDs must be unique")
        oids = [o.id for o in self.objects]
        if len(set(oids)) != len(oids):
            raise ConfigurationError("object IDs must be unique")
        for o in self.objects:
            if not 1 <= o.true_class <= self.num_classes:
                raise ConfigurationError(f"object {o.id} has class {o.true_class} outside [1, {self.num_classes}]")
        if self.sensing_range_m <= 0 or self.communication_range_m <= 0:
            raise ConfigurationError("ranges must be positive")
        if not 0.0 <= self.prune_ratio < 1.0:
            raise ConfigurationError("prune_ratio must lie in [0, 1)")
        if self.n_samples < 1:
            raise ConfigurationError("n_samples must be >= 1")
        validate_covariance(self.motion_cov, "motion noise covariance")
        validate_covariance(self.geometric_cov, "geometric noise covariance")
        validate_covariance(self.initial_pose_cov, "initial pose covariance")
        for name, cov in (("motion", self.motion_cov), ("geometric", self.geometric_cov), ("initial pose", self.initial_pose_cov)):
            if np.linalg.eigvalsh(cov).min() <= 0:
                raise ConfigurationError(f"{name} covariance must be positive definite for inference")
        if self.class_prior is not None:
            cp = self.class_prior
            if cp.shape != (self.num_classes,) or np.any(cp <= 0) or abs(cp.sum() - 1) > 1e-9:
                raise ConfigurationError("class_prior must be a positive probability vector of length num_classes")
        self.build_model()

    def build_model(self) -> ViewpointModel:
        spec = self.classifier
        kind = spec.get("type", "simulation")
        sqrt_info = spec.get("sqrt_info")
        if kind == "simulation":
            if self.num_classes != 2:
                raise ConfigurationError("the simulation classifier model is defined for two classes")
            return SimulationModel(SIMULATION_SQRT_INFO if sqrt_info is None else sqrt_info)
        if kind == "constant":
            means = spec["means"]
            model = ConstantModel(means, SIMULATION_SQRT_INFO if sqrt_info is None else sqrt_info)
        elif kind == "lookup":
            path = Path(spec["path"])
            if not path.is_absolute() and self.base_dir is not None:
                path = self.base_dir / path
            try:
                model = load_lookup_model(path, sqrt_info=sqrt_info, elevation_deg=spec.get("elevation_deg"))
            except LoadError as exc:
                raise ConfigurationError(str(exc)) from exc
        else:
            raise ConfigurationError(f"unknown classifier type {kind!r}")
        if model.num_classes != self.num_classes:
            raise ConfigurationError("classifier model class count does not match num_classes")
        return model

    def with_overrides(self, **kw) -> "ScenarioConfig":
        d = dict(self.raw)
        d.update({k: v for k, v in kw.items() if v is not None})
        return ScenarioConfig.from_dict(d, self.base_dir)

    def signature(self) -> str:
        """Canonical JSON of the configuration without the seed."""
        d = {k: v for k, v in self.raw.items() if k != "seed"}
        return json.dumps(d, sort_keys=True)


def _robot_from_dict(r: dict, steps: int) -> RobotSpec:
    start = Pose2(*r["initial_pose_m_m_rad"])
    if "control_segments" in r:
        controls = []
        for seg in r["control_segments"]:
            u = Pose2(seg.get("dx_m", 0.0), seg.get("dy_m", 0.0), seg.get("dtheta_rad", 0.0))
            controls += [u] * int(seg["steps"])
    elif "waypoints_m" in r:
        controls = _controls_from_waypoints(start, r["waypoints_m"], float(r.get("speed_m_per_step", 1.0)), steps)
    else:
        raise ConfigurationError(f"robot {r.get('id')} needs control_segments or waypoints_m")
    if len(controls) < steps:
        controls += [Pose2()] * (steps - len(controls))
    return RobotSpec(int(r["id"]), start, tuple(controls[:steps]))


def _controls_from_waypoints(start: Pose2, waypoints, speed: float, steps: int) -> List[Pose2]:
    """Unit-step controls: turn toward the next waypoint and advance ``speed`` meters."""
    pose = start
    targets = [tuple(map(float, w)) for w in waypoints]
    out = []
    for _ in range(steps):
        while targets and math.hypot(targets[0][0] - pose.x, targets[0][1] - pose.y) < 1e-9:
            targets.pop(0)
        if not targets:
            out.append(Pose2())
            continue
        tx, ty = targets[0]
        dist = math.hypot(tx - pose.x, ty - pose.y)
        heading = math.atan2(ty - pose.y, tx - pose.x)
        d = min(speed, dist)
        new = Pose2(pose.x + d * math.cos(heading), pose.y + d * math.sin(heading), heading)
        out.append(between(pose, new))
        pose = new
    return out


def ground_truth(cfg: ScenarioConfig) -> dict:
    """``robot id -> [x_0, ..., x_K]`` true poses."""
    out = {}
    for r in cfg.robots:
        poses = [r.initial_pose]
        for u in r.controls:
            poses.append(poses[-1].compose(u))
        out[r.id] = poses
    return out
