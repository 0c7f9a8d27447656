"""
Planning models: robot states and controls, the coarse horizon model,
assignment / viewpoint results and transcribed trajectories
"""
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.optimize import brentq

from src.models.arrays import NDArray
from src.models.gaussian import Gaussian, GaussianMixture, _validated_moments
from src.models.sensor import SensorModel


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(theta, dtype=float), 2.0 * np.pi)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


# ==================== Robot ====================

class UnicycleState(BaseModel):
    model_config = ConfigDict(frozen=True)

    x: float
    y: float
    theta: float = 0.0

    @field_validator("theta")
    @classmethod
    def _wrap(cls, value: float) -> float:
        return wrap_angle(value)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @classmethod
    def from_array(cls, values) -> "UnicycleState":
        return cls(x=float(values[0]), y=float(values[1]), theta=float(values[2]))


class ControlInput(BaseModel):
    model_config = ConfigDict(frozen=True)

    v: float = Field(default=0.0, ge=0.0)
    omega: float = 0.0


class AgentState(BaseModel):
    """Robot belief: pose mean plus positional covariance, with its control limits"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    id: int
    pose: UnicycleState
    cov: NDArray = Field(default_factory=lambda: np.zeros((2, 2)))
    v_max: float = Field(default=1.3, gt=0.0)
    omega_max: float = Field(default=np.pi / 2, gt=0.0)

    @model_validator(mode="after")
    def _check(self) -> "AgentState":
        _, cov = _validated_moments(np.zeros(2), self.cov)
        object.__setattr__(self, "cov", cov)
        return self

    @property
    def position(self) -> np.ndarray:
        return self.pose.position


# ==================== Horizon layer ====================

class CoarseModel(BaseModel):
    """Linear horizon model x_T = F_x x_0 + B u + w with u in an axis-aligned box"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    F_x: NDArray
    B: NDArray
    u_low: NDArray
    u_high: NDArray
    reach_radius: float = Field(gt=0.0)
    w_cov: NDArray
    T: float = Field(gt=0.0)

    @model_validator(mode="after")
    def _check_ball(self) -> "CoarseModel":
        # the box image B*U contains the reach ball iff every direction's support is >= radius
        for angle in np.linspace(0.0, 2.0 * np.pi, 72, endpoint=False):
            direction = np.array([np.cos(angle), np.sin(angle)])
            g = self.B.T @ direction
            support = float(np.sum(np.maximum(g * self.u_high, g * self.u_low)))
            if support < self.reach_radius * (1.0 - 1e-9):
                raise ValueError("reachable set does not contain the reach ball")
        return self

    @classmethod
    def for_unicycle(cls, v_max: float, T: float, w_cov=None) -> "CoarseModel":
        bound = 0.9 * v_max
        return cls(
            F_x=np.eye(2),
            B=T * np.eye(2),
            u_low=-bound * np.ones(2),
            u_high=bound * np.ones(2),
            reach_radius=bound * T,
            w_cov=np.zeros((2, 2)) if w_cov is None else w_cov,
            T=T,
        )


class AssignmentResult(BaseModel):
    pairs: Dict[int, int] = Field(default_factory=dict)  # track id -> robot id
    unassigned_robots: List[int] = Field(default_factory=list)
    cost: float = 0.0

    def robot_to_track(self) -> Dict[int, int]:
        return {robot: track for track, robot in self.pairs.items()}

    def role_of(self, robot_id: int) -> str:
        track = self.robot_to_track().get(robot_id)
        return "explore" if track is None else f"track:{track}"


class FeasibilityEllipsoid(BaseModel):
    """{x : (x - center)' shape^-1 (x - center) <= radius_sq}"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    track_id: Optional[int] = None
    center: NDArray
    shape: NDArray
    radius_sq: float
    feasible: bool

    def margin(self, x) -> float:
        diff = np.asarray(x, dtype=float) - self.center
        return float(self.radius_sq - diff @ np.linalg.solve(self.shape, diff))

    def contains(self, x, tol: float = 1e-9) -> bool:
        return self.feasible and self.margin(x) >= -tol

    def project(self, x) -> np.ndarray:
        """Euclidean projection onto the ellipsoid (the centre when infeasible)."""
        x = np.asarray(x, dtype=float)
        if not self.feasible:
            return self.center.copy()
        if self.margin(x) >= 0.0:
            return x
        lam, vecs = np.linalg.eigh(self.shape)
        y0 = vecs.T @ (x - self.center)

        def excess(mu: float) -> float:
            return float(np.sum(lam * y0**2 / (lam + mu) ** 2) - self.radius_sq)

        upper = float(np.sqrt(np.sum(lam * y0**2) / self.radius_sq))
        mu = upper if excess(upper) >= 0.0 else brentq(excess, 0.0, upper, xtol=1e-14, rtol=1e-12)
        y = y0 * lam / (lam + mu)
        # land strictly inside against round-off
        y *= min(1.0, np.sqrt(self.radius_sq / max(np.sum(y**2 / lam), 1e-300)) * (1.0 - 1e-12))
        return self.center + vecs @ y


class Viewpoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    position: NDArray
    heading: float = 0.0


class NbvSolution(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    viewpoints: Dict[int, Viewpoint] = Field(default_factory=dict)
    assignment: AssignmentResult = Field(default_factory=AssignmentResult)
    objective_value: float = 0.0
    feasible: bool = True
    infeasible_track_ids: List[int] = Field(default_factory=list)
    terminal_detect_prob: Dict[int, float] = Field(default_factory=dict)
    jensen_ok: Dict[int, bool] = Field(default_factory=dict)
    separation_violations: List[Tuple[int, int]] = Field(default_factory=list)


# ==================== Trajectories ====================

class TrajectoryKnot(BaseModel):
    model_config = ConfigDict(frozen=True)

    t: float
    state: UnicycleState
    control: ControlInput


class Trajectory(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    knots: List[TrajectoryKnot] = Field(min_length=2)
    dt_knot: float = Field(gt=0.0)
    objective: float = 0.0
    max_defect: float = 0.0
    terminal_residual: float = 0.0
    converged: bool = True
    warning: Optional[str] = None
    multipliers: Optional[NDArray] = None
    penalty: Optional[float] = None

    @model_validator(mode="after")
    def _check_times(self) -> "Trajectory":
        times = self.times
        steps = np.diff(times)
        if np.any(steps <= 0.0):
            raise ValueError("knot times must be strictly increasing")
        if np.abs(steps - self.dt_knot).max() > 1e-6 * max(1.0, self.dt_knot):
            raise ValueError("knot times must be uniformly spaced by dt_knot")
        return self

    @classmethod
    def from_arrays(cls, times, states, controls, **extra) -> "Trajectory":
        times = np.asarray(times, dtype=float)
        knots = [
            TrajectoryKnot(
                t=float(t),
                state=UnicycleState.from_array(s),
                control=ControlInput(v=max(float(u[0]), 0.0), omega=float(u[1])),
            )
            for t, s, u in zip(times, states, controls)
        ]
        return cls(knots=knots, dt_knot=float(times[1] - times[0]), **extra)

    @property
    def times(self) -> np.ndarray:
        return np.array([k.t for k in self.knots])

    @property
    def states(self) -> np.ndarray:
        return np.array([k.state.as_array() for k in self.knots])

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    @property
    def controls(self) -> np.ndarray:
        return np.array([[k.control.v, k.control.omega] for k in self.knots])

    def to_rows(self, robot_id: Optional[int] = None) -> List[dict]:
        rows = []
        for k in self.knots:
            row = {"t": k.t, "x": k.state.x, "y": k.state.y, "theta": k.state.theta,
                   "v": k.control.v, "omega": k.control.omega}
            if robot_id is not None:
                row = {"robot_id": robot_id, **row}
            rows.append(row)
        return rows


class TrackedKernel(BaseModel):
    """Predicted tracked-object position belief moving at a constant velocity"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    belief: Gaussian
    velocity: NDArray = Field(default_factory=lambda: np.zeros(2))
    weight: float = Field(default=1.0, ge=0.0)


class PathObjective(BaseModel):
    """Integrand of the path line-integral: untracked belief plus tracked kernels"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    belief: GaussianMixture
    tracked_kernels: List[TrackedKernel] = Field(default_factory=list)
    sensor: SensorModel
    robot_cov: NDArray = Field(default_factory=lambda: np.zeros((2, 2)))
