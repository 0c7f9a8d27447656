"""
Tracked-object models: LTI dynamics, Kalman tracks and covariance-study reports
"""
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.models.arrays import NDArray, symmetrize
from src.models.gaussian import Gaussian, _validated_moments


class LtiModel(BaseModel):
    """Discrete LTI object model a' = F a + w, z = H a + v (per step of length dt)"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    F: NDArray
    Q: NDArray
    H: NDArray
    R: NDArray
    dt: float = Field(default=0.1, gt=0.0)

    @model_validator(mode="after")
    def _check(self) -> "LtiModel":
        F, Q, H, R = (np.atleast_2d(m) for m in (self.F, self.Q, self.H, self.R))
        n = F.shape[0]
        if F.shape != (n, n) or Q.shape != (n, n):
            raise ValueError("F and Q must be square with matching size")
        if H.shape[1] != n or R.shape != (H.shape[0], H.shape[0]):
            raise ValueError("H must be (n_z, n_a) and R (n_z, n_z)")
        _, Q = _validated_moments(np.zeros(n), Q)
        _, R = _validated_moments(np.zeros(H.shape[0]), R)
        if np.linalg.eigvalsh(R).min() <= 0.0:
            raise ValueError("R must be positive definite")
        blocks, power = [], np.eye(n)
        for _ in range(n):
            blocks.append(H @ power)
            power = F @ power
        if np.linalg.matrix_rank(np.vstack(blocks)) < n:
            raise ValueError("(F, H) is not observable")
        for name, value in (("F", F), ("Q", Q), ("H", H), ("R", R)):
            object.__setattr__(self, name, value)
        return self

    @property
    def n_a(self) -> int:
        return int(self.F.shape[0])

    @property
    def n_z(self) -> int:
        return int(self.H.shape[0])

    @classmethod
    def constant_velocity(cls, dt: float = 0.1, q: float = 0.05, r: float = 0.01, dim: int = 2) -> "LtiModel":
        """Planar constant-velocity model with white-acceleration noise of intensity q."""
        eye = np.eye(dim)
        zero = np.zeros((dim, dim))
        F = np.block([[eye, dt * eye], [zero, eye]])
        Q = q * np.block([[dt**3 / 3.0 * eye, dt**2 / 2.0 * eye], [dt**2 / 2.0 * eye, dt * eye]])
        H = np.hstack([eye, zero])
        return cls(F=F, Q=Q, H=H, R=r * eye, dt=dt)

    def transition(self, steps: int):
        """(F^k, sum_i F^i Q F^i') for k steps."""
        Fk = np.eye(self.n_a)
        Qk = np.zeros((self.n_a, self.n_a))
        for _ in range(steps):
            Qk = self.F @ Qk @ self.F.T + self.Q
            Fk = self.F @ Fk
        return Fk, symmetrize(Qk)

    def lifted(self, steps: int) -> "LtiModel":
        """Coarse model whose single step spans `steps` fine steps."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        Fk, Qk = self.transition(steps)
        return LtiModel(F=Fk, Q=Qk, H=self.H, R=self.R, dt=self.dt * steps)


class KalmanTrack(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    id: int
    mean: NDArray
    cov: NDArray
    model: LtiModel
    last_update: float = 0.0

    @model_validator(mode="after")
    def _check(self) -> "KalmanTrack":
        mean, cov = _validated_moments(self.mean, self.cov)
        if mean.shape[0] != self.model.n_a:
            raise ValueError("track state dimension does not match its model")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        return self

    def position(self) -> np.ndarray:
        return self.model.H @ self.mean

    def velocity(self) -> np.ndarray:
        """Velocity block for constant-velocity models (zeros otherwise)."""
        n_z = self.model.n_z
        if self.model.n_a >= 2 * n_z:
            return self.mean[n_z:2 * n_z]
        return np.zeros(n_z)

    def position_belief(self) -> Gaussian:
        H = self.model.H
        return Gaussian(mean=H @ self.mean, cov=H @ self.cov @ H.T)


class CovarianceStudyReport(BaseModel):
    """Monte-Carlo distribution of positional covariance norms"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    detect_prob: float
    horizons: int
    trials: int
    steps_per_horizon: int
    seed: Optional[int] = None
    norms: List[float]
    mean_norm: float
    pmf_peak_fraction: float = Field(ge=0.0, le=1.0)
    pmf_edges: List[float] = Field(default_factory=list)
    pmf_fractions: List[float] = Field(default_factory=list)
    cdf_at: Dict[float, float] = Field(default_factory=dict)

    def summary(self) -> dict:
        return self.model_dump(exclude={"norms"})
