"""
Per-robot trajectory optimization by direct transcription

Maximizes the line integral of detection probability along a unicycle path
that must end at the NBV viewpoint. Knot states and controls are the NLP
variables; trapezoidal dynamics defects and the terminal position are
equality constraints handled by an augmented Lagrangian around L-BFGS-B.
"""
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from src.models.planning import (
    ControlInput,
    PathObjective,
    Trajectory,
    UnicycleState,
    Viewpoint,
    wrap_angle,
)
from src.services import kinematics
from src.services.sensor import DetectionField
from src.utils.exceptions import InfeasiblePathError, InvalidArgumentError
from src.utils.logger import get_logger
from src.utils.rng import SeedLike, as_generator

logger = get_logger(__name__)

EFFORT_WEIGHT = 1e-4
CONSTRAINT_TOL = 1e-6
ACCEPT_TOL = 1e-4
MAX_OUTER = 12
MAX_INNER = 100
INNER_FTOL = 1e-12
INNER_GTOL = 1e-8
MU_START = 100.0
MU_WARM_CAP = 1e4


def path_field(obj: PathObjective) -> DetectionField:
    """Detection field of the untracked belief plus the moving tracked kernels."""
    field = DetectionField.for_mixture(obj.sensor, obj.robot_cov, obj.belief)
    for kernel in obj.tracked_kernels:
        if kernel.weight > 0.0:
            field = field + DetectionField.for_gaussian(
                obj.sensor, obj.robot_cov, kernel.belief, velocity=kernel.velocity, weight=kernel.weight
            )
    return field


def _trapezoid_weights(n: int) -> np.ndarray:
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    return w


def objective_along_path(obj: PathObjective, traj: Trajectory) -> float:
    """Trapezoidal quadrature of the summed detection probability along the knots."""
    field = path_field(obj)
    if len(field) == 0:
        return 0.0
    times = traj.times
    values = field.value(traj.positions, times - times[0])
    return float(traj.dt_knot * _trapezoid_weights(len(times)) @ values)


def trapezoid_defects(states: np.ndarray, controls: np.ndarray, h: float) -> np.ndarray:
    """Dynamics defects with heading differences wrapped, shape (N-1, 3)."""
    f = kinematics.rates(states, controls)
    delta = np.diff(states, axis=0)
    delta[:, 2] = wrap_angle(delta[:, 2])
    return delta - 0.5 * h * (f[1:] + f[:-1])


# ==================== Transcription ====================

class TranscriptionProblem:
    """Variables z = [states (N x 3) | controls (N x 2)] flattened row-major."""

    def __init__(
        self,
        start: UnicycleState,
        goal_position,
        goal_heading: Optional[float],
        field: DetectionField,
        v_max: float,
        omega_max: float,
        T: float,
        n_knots: int,
    ):
        self.n = n_knots
        self.h = T / (n_knots - 1)
        self.start = start.as_array()
        self.goal = np.asarray(goal_position, dtype=float)
        self.goal_heading = goal_heading
        self.field = field
        self.v_max = v_max
        self.omega_max = omega_max
        self.taus = np.arange(n_knots) * self.h
        self.weights = _trapezoid_weights(n_knots)

    @property
    def size(self) -> int:
        return 5 * self.n

    @property
    def n_constraints(self) -> int:
        return 3 * (self.n - 1) + 2 + (0 if self.goal_heading is None else 1)

    def unpack(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        states = z[: 3 * self.n].reshape(self.n, 3)
        controls = z[3 * self.n:].reshape(self.n, 2)
        return states, controls

    @staticmethod
    def pack(states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        return np.concatenate([states.ravel(), controls.ravel()])

    def bounds(self):
        state_bounds = [(s, s) for s in self.start] + [(None, None)] * (3 * (self.n - 1))
        control_bounds = [(0.0, self.v_max), (-self.omega_max, self.omega_max)] * self.n
        return state_bounds + control_bounds

    # ---------- objective ----------

    def objective(self, z: np.ndarray) -> Tuple[float, np.ndarray]:
        states, controls = self.unpack(z)
        grad_s = np.zeros_like(states)
        value = 0.0
        if len(self.field):
            p, dp = self.field.value_and_gradient(states[:, :2], self.taus)
            value -= self.h * float(self.weights @ p)
            grad_s[:, :2] = -self.h * self.weights[:, None] * dp
        effort = (controls**2).sum(axis=1)
        value += EFFORT_WEIGHT * self.h * float(self.weights @ effort)
        grad_u = 2.0 * EFFORT_WEIGHT * self.h * self.weights[:, None] * controls
        return value, self.pack(grad_s, grad_u)

    # ---------- constraints ----------

    def constraints(self, z: np.ndarray) -> np.ndarray:
        states, controls = self.unpack(z)
        f = kinematics.rates(states, controls)
        defects = states[1:] - states[:-1] - 0.5 * self.h * (f[1:] + f[:-1])
        parts = [defects.ravel(), states[-1, :2] - self.goal]
        if self.goal_heading is not None:
            parts.append(np.array([wrap_angle(states[-1, 2] - self.goal_heading)]))
        return np.concatenate(parts)

    def constraint_vjp(self, z: np.ndarray, y: np.ndarray) -> np.ndarray:
        """J_c(z)' y without forming the Jacobian."""
        states, controls = self.unpack(z)
        n = self.n
        y_d = y[: 3 * (n - 1)].reshape(n - 1, 3)
        y_t = y[3 * (n - 1): 3 * (n - 1) + 2]

        grad_s = np.zeros_like(states)
        grad_u = np.zeros_like(controls)
        grad_s[1:] += y_d
        grad_s[:-1] -= y_d

        g = np.zeros((n, 3))
        g[:-1] -= 0.5 * self.h * y_d
        g[1:] -= 0.5 * self.h * y_d
        theta = states[:, 2]
        v = controls[:, 0]
        cos, sin = np.cos(theta), np.sin(theta)
        grad_s[:, 2] += g[:, 0] * (-v * sin) + g[:, 1] * (v * cos)
        grad_u[:, 0] += g[:, 0] * cos + g[:, 1] * sin
        grad_u[:, 1] += g[:, 2]

        grad_s[-1, :2] += y_t
        if self.goal_heading is not None:
            grad_s[-1, 2] += y[-1]
        return self.pack(grad_s, grad_u)

    def augmented(self, z: np.ndarray, lam: np.ndarray, mu: float) -> Tuple[float, np.ndarray]:
        value, grad = self.objective(z)
        c = self.constraints(z)
        y = lam + mu * c
        value += float(lam @ c) + 0.5 * mu * float(c @ c)
        return value, grad + self.constraint_vjp(z, y)

    # ---------- diagnostics ----------

    def path_value(self, z: np.ndarray) -> float:
        """Detection line integral alone (no effort term)."""
        if not len(self.field):
            return 0.0
        states, _ = self.unpack(z)
        return float(self.h * self.weights @ self.field.value(states[:, :2], self.taus))

    def max_defect(self, z: np.ndarray) -> float:
        c = self.constraints(z)
        return float(np.abs(c[: 3 * (self.n - 1)]).max())

    def terminal_residual(self, z: np.ndarray) -> float:
        c = self.constraints(z)
        return float(np.abs(c[3 * (self.n - 1):]).max())

    def violation(self, z: np.ndarray) -> float:
        return float(np.abs(self.constraints(z)).max())

    def within_bounds(self, z: np.ndarray) -> bool:
        _, controls = self.unpack(z)
        return bool(
            np.all(controls[:, 0] >= -1e-12)
            and np.all(controls[:, 0] <= self.v_max + 1e-12)
            and np.all(np.abs(controls[:, 1]) <= self.omega_max + 1e-12)
        )


# ==================== Seeds ====================

def arc_seed(problem: TranscriptionProblem) -> np.ndarray:
    """Constant-control circular arc to the goal that satisfies the trapezoidal defects exactly."""
    n, h = problem.n, problem.h
    T = h * (n - 1)
    x0, y0, theta0 = problem.start
    offset = problem.goal - problem.start[:2]
    distance = float(np.linalg.norm(offset))
    if distance < 1e-12:
        turn = 0.0
    else:
        turn = 2.0 * wrap_angle(np.arctan2(offset[1], offset[0]) - theta0)
    omega = float(np.clip(turn / T, -problem.omega_max, problem.omega_max))
    thetas = theta0 + omega * problem.taus
    headings = np.column_stack([np.cos(thetas), np.sin(thetas)])
    increments = 0.5 * h * (headings[1:] + headings[:-1])
    chord = increments.sum(axis=0)
    chord_norm = float(np.linalg.norm(chord))
    v = distance / chord_norm if chord_norm > 1e-12 else 0.0
    v = float(np.clip(v, 0.0, problem.v_max))

    positions = np.vstack([np.zeros(2), np.cumsum(v * increments, axis=0)]) + np.array([x0, y0])
    states = np.column_stack([positions, thetas])
    controls = np.tile([v, omega], (n, 1))
    return problem.pack(states, controls)


def _warm_seed(problem: TranscriptionProblem, previous: Trajectory, t0: float) -> Optional[np.ndarray]:
    times = t0 + problem.taus
    old_t = previous.times
    if times[0] < old_t[0] - 1e-9 or times[0] > old_t[-1]:
        return None
    old_states = previous.states.copy()
    old_states[:, 2] = np.unwrap(old_states[:, 2])
    states = np.column_stack([np.interp(times, old_t, old_states[:, i]) for i in range(3)])
    controls = np.column_stack([np.interp(times, old_t, previous.controls[:, i]) for i in range(2)])
    controls[:, 0] = np.clip(controls[:, 0], 0.0, problem.v_max)
    controls[:, 1] = np.clip(controls[:, 1], -problem.omega_max, problem.omega_max)
    shift = problem.start[2] - states[0, 2]
    states[:, 2] += 2.0 * np.pi * np.round(shift / (2.0 * np.pi))
    states[0] = problem.start
    return problem.pack(states, controls)


def _jittered(problem: TranscriptionProblem, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Restart point: interior knots perturbed by a few centimetres, controls kept in bounds."""
    states, controls = problem.unpack(z.copy())
    states[1:, :2] += rng.normal(scale=0.05, size=(problem.n - 1, 2))
    controls[:, 0] = np.clip(controls[:, 0] * rng.uniform(0.9, 1.0, problem.n), 0.0, problem.v_max)
    return problem.pack(states, controls)


# ==================== Solve ====================

def _shifted_multipliers(problem: TranscriptionProblem, previous: Trajectory, t0: float) -> Optional[np.ndarray]:
    """Previous multipliers re-indexed onto the new knot grid when the grids line up."""
    lam = previous.multipliers
    if lam is None or abs(previous.dt_knot - problem.h) > 1e-9 * max(1.0, problem.h):
        return None
    offset = (t0 - previous.times[0]) / problem.h
    k = int(round(offset))
    old_n = len(previous.knots)
    if abs(offset - k) > 1e-6 or k < 0 or k + problem.n > old_n:
        return None
    old_defects = lam[: 3 * (old_n - 1)].reshape(old_n - 1, 3)
    terminal = lam[3 * (old_n - 1):]
    out = np.zeros(problem.n_constraints)
    split = 3 * (problem.n - 1)
    out[:split] = old_defects[k: k + problem.n - 1].ravel()
    kept = min(terminal.size, out.size - split)
    out[split: split + kept] = terminal[:kept]
    return out


def _augmented_lagrangian(
    problem: TranscriptionProblem,
    z0: np.ndarray,
    lam0: Optional[np.ndarray] = None,
    mu0: Optional[float] = None,
) -> Tuple[np.ndarray, bool, np.ndarray, float]:
    """Returns (z, converged, multipliers, penalty)."""
    lam = np.zeros(problem.n_constraints) if lam0 is None else np.array(lam0, dtype=float)
    mu = MU_START if mu0 is None else float(np.clip(mu0, MU_START, MU_WARM_CAP))
    z = z0.copy()
    bounds = problem.bounds()
    previous = problem.violation(z)
    for outer in range(MAX_OUTER):
        result = minimize(
            problem.augmented,
            z,
            args=(lam, mu),
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": MAX_INNER, "ftol": INNER_FTOL, "gtol": INNER_GTOL},
        )
        z = result.x
        c = problem.constraints(z)
        norm = float(np.abs(c).max())
        logger.debug("Augmented Lagrangian iteration", outer=outer, violation=norm, mu=mu, nfev=result.nfev)
        lam = lam + mu * c
        if norm <= CONSTRAINT_TOL:
            return z, True, lam, mu
        if norm > 0.25 * previous:
            mu = min(mu * 10.0, 1e8)
        previous = norm
    return z, problem.violation(z) <= ACCEPT_TOL, lam, mu


def _as_goal(goal) -> Tuple[np.ndarray, Optional[float]]:
    if isinstance(goal, Viewpoint):
        return goal.position, goal.heading
    position, heading = goal
    return np.asarray(position, dtype=float), heading


def solve_path(
    start: UnicycleState,
    goal,
    obj: PathObjective,
    bounds: Tuple[float, float],
    T: float,
    n_knots: int = 21,
    rng_seed: SeedLike = None,
    terminal_heading: bool = False,
    warm_start: Optional[Trajectory] = None,
    t0: float = 0.0,
) -> Trajectory:
    """
    Locally optimal path from `start` to the goal position (heading too when
    `terminal_heading`). Never returns worse than its feasible arc seed.
    """
    if n_knots < 5:
        raise InvalidArgumentError("n_knots must be >= 5")
    if not T > 0.0:
        raise InvalidArgumentError("T must be > 0")
    v_max, omega_max = bounds
    goal_position, goal_heading = _as_goal(goal)
    if np.linalg.norm(goal_position - start.position) > v_max * T + 1e-9:
        raise InfeasiblePathError(
            f"goal {np.round(goal_position, 3).tolist()} is beyond reach {v_max * T:.3f} m"
        )

    problem = TranscriptionProblem(
        start,
        goal_position,
        goal_heading if terminal_heading else None,
        path_field(obj),
        v_max,
        omega_max,
        T,
        n_knots,
    )
    seed = arc_seed(problem)
    initial, lam0, mu0 = seed, None, None
    if warm_start is not None:
        warm = _warm_seed(problem, warm_start, t0)
        if warm is not None:
            initial = warm
            lam0 = _shifted_multipliers(problem, warm_start, t0)
            mu0 = warm_start.penalty if lam0 is not None else None

    z, converged, lam, mu = _augmented_lagrangian(problem, initial, lam0, mu0)
    if not converged and initial is not seed:
        z_arc, converged, lam_arc, mu_arc = _augmented_lagrangian(problem, seed)
        if converged:
            z, lam, mu = z_arc, lam_arc, mu_arc
    if not converged:
        z_jit, converged, lam_jit, mu_jit = _augmented_lagrangian(
            problem, _jittered(problem, seed, as_generator(rng_seed))
        )
        if converged:
            z, lam, mu = z_jit, lam_jit, mu_jit

    seed_feasible = problem.violation(seed) <= ACCEPT_TOL and problem.within_bounds(seed)
    if seed_feasible and (not converged or problem.path_value(seed) > problem.path_value(z)):
        z, converged, lam = seed, True, np.zeros(problem.n_constraints)

    warning = None if converged else "iteration limit reached before constraints met"
    if warning:
        logger.warning("Path solve did not converge", violation=problem.violation(z))

    states, controls = problem.unpack(z)
    times = t0 + problem.taus
    traj = Trajectory.from_arrays(
        times,
        states,
        controls,
        max_defect=problem.max_defect(z),
        terminal_residual=problem.terminal_residual(z),
        converged=converged,
        warning=warning,
        multipliers=lam,
        penalty=mu,
    )
    objective = objective_along_path(obj, traj)
    return traj.model_copy(update={"objective": objective})


def extract_control(traj: Trajectory, t_query: float) -> ControlInput:
    """Piecewise-linear interpolation of the knot controls."""
    times = traj.times
    if t_query < times[0] - 1e-9 or t_query > times[-1] + 1e-9:
        raise InvalidArgumentError(f"t={t_query} outside trajectory span [{times[0]}, {times[-1]}]")
    controls = traj.controls
    v = float(np.interp(t_query, times, controls[:, 0]))
    omega = float(np.interp(t_query, times, controls[:, 1]))
    return ControlInput(v=max(v, 0.0), omega=omega)


def corridor_metrics(positions: np.ndarray, start, goal) -> Dict[str, float]:
    """Path length and maximum lateral deviation from the start-goal corridor."""
    positions = np.asarray(positions, dtype=float)
    length = float(np.linalg.norm(np.diff(positions, axis=0), axis=1).sum())
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    axis = goal - start
    span = np.linalg.norm(axis)
    if span < 1e-12:
        deviation = float(np.linalg.norm(positions - start, axis=1).max())
    else:
        normal = np.array([-axis[1], axis[0]]) / span
        deviation = float(np.abs((positions - start) @ normal).max())
    return {"path_length": length, "max_lateral_deviation": deviation}


def path_metrics(traj: Trajectory, start, goal) -> Dict[str, float]:
    return corridor_metrics(traj.positions, start, goal)


def plan_paths(
    jobs: Sequence[dict],
    workers: int = 1,
) -> Dict[int, Trajectory]:
    """Solve independent per-robot paths, optionally on a thread pool; infeasible robots are left out."""
    def run(job: dict) -> Tuple[int, Optional[Trajectory]]:
        robot_id = job.pop("robot_id")
        try:
            return robot_id, solve_path(**job)
        except InfeasiblePathError as exc:
            logger.warning("Path solve infeasible", robot_id=robot_id, error=str(exc))
            return robot_id, None

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, [dict(job) for job in jobs]))
    else:
        results = [run(dict(job)) for job in jobs]
    return {robot_id: traj for robot_id, traj in results if traj is not None}
