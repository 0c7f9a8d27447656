"""
Scenario configuration, ground truth and run-log models
"""
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.models.arrays import NDArray
from src.models.gaussian import GaussianMixture
from src.models.jet import JetParams, StepRecord
from src.models.planning import UnicycleState
from src.models.sensor import SensorModel
from src.models.tracking import LtiModel


class Arena(BaseModel):
    xmin: float = 0.0
    xmax: float = 12.0
    ymin: float = 0.0
    ymax: float = 12.0

    @model_validator(mode="after")
    def _check(self) -> "Arena":
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError("arena bounds must satisfy max > min")
        return self

    def contains(self, point) -> bool:
        x, y = float(point[0]), float(point[1])
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax

    @property
    def bounds(self):
        return (self.xmin, self.xmax, self.ymin, self.ymax)


class RobotSpec(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    pose: UnicycleState
    v_max: float = Field(default=1.3, gt=0.0)
    omega_max: float = Field(default=float(np.pi / 2), gt=0.0)
    cov: NDArray = Field(default_factory=lambda: np.zeros((2, 2)))


class ObjectSpec(BaseModel):
    """Initial object state (x, y, vx, vy)"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    label: Optional[str] = None
    state: NDArray

    @model_validator(mode="after")
    def _check(self) -> "ObjectSpec":
        if self.state.shape != (4,):
            raise ValueError("object state must be (x, y, vx, vy)")
        return self


class ObjectModelSpec(BaseModel):
    """Constant-velocity object model parameters"""

    q: float = Field(default=0.05, gt=0.0)
    r: float = Field(default=0.01, gt=0.0)

    def build(self, dt: float) -> LtiModel:
        return LtiModel.constant_velocity(dt=dt, q=self.q, r=self.r)


class ScenarioConfig(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    name: str = "scenario"
    arena: Arena = Field(default_factory=Arena)
    robots: List[RobotSpec] = Field(min_length=1)
    objects: List[ObjectSpec] = Field(default_factory=list)
    known_objects: List[str] = Field(default_factory=list)
    sensor: SensorModel = Field(default_factory=SensorModel.isotropic)
    params: JetParams = Field(default_factory=JetParams)
    object_model: ObjectModelSpec = Field(default_factory=ObjectModelSpec)
    object_speed: float = Field(default=1.0, gt=0.0)
    prior: Optional[GaussianMixture] = None
    duration: float = Field(default=30.0, ge=0.0)
    seed: int = 0
    robot_process_noise: float = Field(default=0.0, ge=0.0)
    deterministic_objects: bool = False
    exclusion_radius: float = Field(default=3.0, ge=0.0)
    measurement_rate: float = Field(default=10.0, gt=0.0)

    @model_validator(mode="after")
    def _check(self) -> "ScenarioConfig":
        for i, obj in enumerate(self.objects):
            if obj.label is None:
                obj.label = f"obj{i}"
        labels = [o.label for o in self.objects]
        if len(set(labels)) != len(labels):
            raise ValueError("object labels must be unique")
        if len(self.objects) > len(self.robots):
            raise ValueError(
                f"objects ({len(self.objects)}) must not outnumber robots ({len(self.robots)})"
            )
        unknown = set(self.known_objects) - set(labels)
        if unknown:
            raise ValueError(f"known_objects names unknown labels {sorted(unknown)}")
        for i, robot in enumerate(self.robots):
            if not self.arena.contains(robot.pose.position):
                raise ValueError(f"robot {i} starts outside the arena")
        for obj in self.objects:
            if not self.arena.contains(obj.state[:2]):
                raise ValueError(f"object {obj.label} starts outside the arena")
            if obj.label in self.known_objects:
                continue
            for i, robot in enumerate(self.robots):
                if np.linalg.norm(obj.state[:2] - robot.pose.position) < self.exclusion_radius:
                    raise ValueError(
                        f"object {obj.label} starts within {self.exclusion_radius} m of robot {i}"
                    )
        ratio = 1.0 / (self.measurement_rate * self.params.dt)
        if ratio < 1.0 - 1e-9 or abs(ratio - round(ratio)) > 1e-6:
            raise ValueError("sensing period must be a whole number of control steps")
        if self.prior is not None and self.prior.dim not in (None, 2):
            raise ValueError("prior must be planar")
        return self

    @property
    def sense_every(self) -> int:
        return int(round(1.0 / (self.measurement_rate * self.params.dt)))

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.params.dt))


class TruthState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    time: float = 0.0
    robot_poses: Dict[int, UnicycleState]
    object_states: Dict[str, NDArray] = Field(default_factory=dict)


class MetricsLog(BaseModel):
    """Append-only run log"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    scenario: str = ""
    seed: int = 0
    steps: List[dict] = Field(default_factory=list)
    records: List[StepRecord] = Field(default_factory=list)
    plans: List[dict] = Field(default_factory=list)
    discovery_times: Dict[str, float] = Field(default_factory=dict)
    horizon_checks: List[dict] = Field(default_factory=list)
    cov_norms: List[dict] = Field(default_factory=list)
    objective_trace: List[dict] = Field(default_factory=list)
    warnings: List[str] = Field(default_factory=list)
    heatmaps: List[dict] = Field(default_factory=list)
    known_labels: List[str] = Field(default_factory=list)
    completed: bool = False

    def summary(self, n_objects: int) -> dict:
        checks = [c for c in self.horizon_checks if not c["fallback"]]
        planned_ok = [c["planned_ok"] for c in checks]
        detected = [c["detected"] for c in self.horizon_checks]
        norms = [row["cov_norm"] for row in self.cov_norms]
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "completed": self.completed,
            "steps": len(self.records),
            "objects": n_objects,
            "discovered": len(self.discovery_times),
            "all_discovered": len(set(self.discovery_times) | set(self.known_labels)) >= n_objects,
            "discovery_times": dict(sorted(self.discovery_times.items())),
            "horizon_checks": len(self.horizon_checks),
            "jensen_satisfied_fraction": float(np.mean(planned_ok)) if planned_ok else None,
            "horizon_detection_fraction": float(np.mean(detected)) if detected else None,
            "max_cov_norm": max(norms) if norms else None,
            "warnings": len(self.warnings),
        }


class RunManifest(BaseModel):
    command: str
    config_path: Optional[str] = None
    seed: Optional[int] = None
    output_dir: str
    run_id: str
    options: Dict[str, object] = Field(default_factory=dict)
