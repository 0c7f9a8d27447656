"""
Shared fixtures
"""
import numpy as np
import pytest

from src.models.gaussian import Gaussian, GaussianMixture
from src.models.planning import AgentState, UnicycleState
from src.models.sensor import SensorModel
from src.models.tracking import KalmanTrack, LtiModel
from src.utils.config import get_fresh_settings


@pytest.fixture(autouse=True)
def _fresh_settings(monkeypatch):
    """Isolate every test from JETPLAN_* variables in the caller's shell."""
    for name in ("JETPLAN_MAX_COMPONENTS", "JETPLAN_REFIT_SAMPLE_BUDGET", "JETPLAN_WORKERS",
                 "JETPLAN_HEATMAP_EVERY", "JETPLAN_PLAN_LOG_EVERY"):
        monkeypatch.delenv(name, raising=False)
    get_fresh_settings()
    yield
    get_fresh_settings()


@pytest.fixture
def sensor() -> SensorModel:
    return SensorModel.isotropic(sigma=0.5)


@pytest.fixture
def cv_model() -> LtiModel:
    return LtiModel.constant_velocity(dt=0.1, q=0.05, r=0.01)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def gaussian(mean, var) -> Gaussian:
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(var, dtype=float)
    if cov.ndim == 0:
        cov = float(var) * np.eye(mean.shape[0])
    return Gaussian(mean=mean, cov=cov)


def density_mixture(masses, means, covs) -> GaussianMixture:
    """Mixture whose components integrate to the given masses."""
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covs, dtype=float)
    norms = np.sqrt(np.linalg.det(2.0 * np.pi * covs))
    return GaussianMixture.from_arrays(np.asarray(masses, dtype=float) / norms, means, covs)


def robot(robot_id: int, x: float, y: float, theta: float = 0.0, v_max: float = 1.3, cov=None) -> AgentState:
    return AgentState(
        id=robot_id,
        pose=UnicycleState(x=x, y=y, theta=theta),
        v_max=v_max,
        cov=np.zeros((2, 2)) if cov is None else cov,
    )


def track(track_id: int, model: LtiModel, position, velocity=(0.0, 0.0), pos_var: float = 0.01,
          vel_var: float = 0.01) -> KalmanTrack:
    mean = np.concatenate([np.asarray(position, dtype=float), np.asarray(velocity, dtype=float)])
    cov = np.diag([pos_var, pos_var, vel_var, vel_var])
    return KalmanTrack(id=track_id, mean=mean, cov=cov, model=model)
