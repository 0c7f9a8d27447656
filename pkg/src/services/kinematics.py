"""
Closed-form unicycle integration shared by the path planner, jet_core dead
reckoning and the ground-truth simulator
"""
import numpy as np

from src.models.planning import ControlInput, UnicycleState, wrap_angle

STRAIGHT_EPS = 1e-9


def integrate(states: np.ndarray, controls: np.ndarray, dt: float) -> np.ndarray:
    """Exact arc integration for constant (v, omega); rows are (x, y, theta) / (v, omega)."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    x, y, theta = states[:, 0], states[:, 1], states[:, 2]
    v, omega = controls[:, 0], controls[:, 1]
    turn = omega * dt
    straight = np.abs(omega) < STRAIGHT_EPS
    safe = np.where(straight, 1.0, omega)
    dx = np.where(straight, v * dt * np.cos(theta), v / safe * (np.sin(theta + turn) - np.sin(theta)))
    dy = np.where(straight, v * dt * np.sin(theta), -v / safe * (np.cos(theta + turn) - np.cos(theta)))
    return np.column_stack([x + dx, y + dy, wrap_angle(theta + turn)])


def step(state: UnicycleState, control: ControlInput, dt: float) -> UnicycleState:
    nxt = integrate(state.as_array(), np.array([control.v, control.omega]), dt)[0]
    return UnicycleState.from_array(nxt)


def rates(states: np.ndarray, controls: np.ndarray) -> np.ndarray:
    """Continuous-time unicycle vector field f(s, u)."""
    theta = states[:, 2]
    v, omega = controls[:, 0], controls[:, 1]
    return np.column_stack([v * np.cos(theta), v * np.sin(theta), omega])
