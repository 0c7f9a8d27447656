"""
Models for the joint exploration / tracking loop
"""
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.models.arrays import NDArray
from src.models.gaussian import GaussianMixture
from src.models.planning import AgentState, AssignmentResult, ControlInput, NbvSolution, Trajectory
from src.models.tracking import KalmanTrack


class ObservationKind(str, Enum):
    DETECTION = "detection"
    MISS = "miss"


class RobotMode(str, Enum):
    JET = "jet"
    PURSUIT = "pursuit"  # hybrid fallback: follow the track, ignore the objective


class JetParams(BaseModel):
    """Loop parameters (times in seconds)"""

    dt: float = Field(default=0.1, gt=0.0)
    T: float = Field(default=2.0, gt=0.0)
    alpha: float = Field(default=0.45, gt=0.0, lt=1.0)
    separation: Optional[float] = Field(default=None, gt=0.0)  # M; sensor default when omitted
    n_knots: int = Field(default=21, ge=5)
    seed: int = 0
    recovery_threshold: float = Field(default=0.05, gt=0.0)
    untracked_diffusion: float = Field(default=0.05, ge=0.0)
    terminal_heading: bool = False
    tracked_weight: float = Field(default=1.0, ge=0.0)
    pursuit_gain: float = Field(default=2.0, gt=0.0)
    max_components: Optional[int] = Field(default=None, ge=1)
    refit_sample_budget: Optional[int] = Field(default=None, ge=1)
    min_overlap: float = Field(default=1e-9, ge=0.0)
    workers: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check_horizon(self) -> "JetParams":
        ratio = self.T / self.dt
        if abs(ratio - round(ratio)) > 1e-6:
            raise ValueError("T must be a multiple of dt")
        return self

    @property
    def horizon_steps(self) -> int:
        return int(round(self.T / self.dt))


class Observation(BaseModel):
    """One sensing outcome of one robot; `label` is the simulator's object key"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    robot_id: int
    kind: ObservationKind
    label: Optional[str] = None
    measurement: Optional[NDArray] = None

    @model_validator(mode="after")
    def _check(self) -> "Observation":
        if self.kind == ObservationKind.DETECTION and (self.label is None or self.measurement is None):
            raise ValueError("detections carry a label and a measurement")
        return self


class SwitchingEvent(BaseModel):
    robot_id: int
    old_role: str
    new_role: str


class StepRecord(BaseModel):
    """Per-step log record"""

    step: int
    time: float
    replanned: bool = False
    horizon_boundary: bool = False
    robot_poses: Dict[int, List[float]] = Field(default_factory=dict)
    tracks: List[dict] = Field(default_factory=list)
    belief_components: int = 0
    belief_mass: float = 0.0
    belief: List[dict] = Field(default_factory=list)
    assignment: Dict[int, int] = Field(default_factory=dict)
    viewpoints: Dict[int, List[float]] = Field(default_factory=dict)
    modes: Dict[int, str] = Field(default_factory=dict)
    switching_events: List[SwitchingEvent] = Field(default_factory=list)
    jensen_checks: Dict[int, bool] = Field(default_factory=dict)
    terminal_detect_prob: Dict[int, float] = Field(default_factory=dict)
    nbv_objective: Optional[float] = None
    path_objectives: Dict[int, float] = Field(default_factory=dict)
    controls: Dict[int, List[float]] = Field(default_factory=dict)
    discoveries: List[int] = Field(default_factory=list)
    warnings: List[str] = Field(default_factory=list)


class InformationState(BaseModel):
    """Everything the planner knows at `time`"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    time: float = 0.0
    step_index: int = 0
    horizon_anchor: float = 0.0
    robots: List[AgentState]
    tracks: List[KalmanTrack] = Field(default_factory=list)
    untracked_belief: GaussianMixture
    control_history: Dict[int, List[ControlInput]] = Field(default_factory=dict)
    label_map: Dict[str, int] = Field(default_factory=dict)
    assignment: AssignmentResult = Field(default_factory=AssignmentResult)
    nbv: Optional[NbvSolution] = None
    trajectories: Dict[int, Trajectory] = Field(default_factory=dict)
    modes: Dict[int, RobotMode] = Field(default_factory=dict)
    pose_fixes: Dict[int, NDArray] = Field(default_factory=dict)
    last_record: Optional[StepRecord] = None

    @model_validator(mode="after")
    def _check_ids(self) -> "InformationState":
        ids = [t.id for t in self.tracks]
        if len(ids) != len(set(ids)):
            raise ValueError("track ids must be unique")
        return self

    def track(self, track_id: int) -> KalmanTrack:
        for t in self.tracks:
            if t.id == track_id:
                return t
        raise KeyError(track_id)

    def robot(self, robot_id: int) -> AgentState:
        for r in self.robots:
            if r.id == robot_id:
                return r
        raise KeyError(robot_id)

    def belief_summary(self) -> List[dict]:
        return [c.model_dump() for c in self.untracked_belief.components]

    def robot_positions(self) -> np.ndarray:
        return np.array([r.position for r in self.robots])
