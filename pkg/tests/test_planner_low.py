"""
Tests for the direct-transcription path planner
"""
import numpy as np
import pytest

from src.agents import planner_low
from src.models.gaussian import GaussianMixture
from src.models.planning import PathObjective, TrackedKernel, Trajectory, UnicycleState, Viewpoint
from src.services.sensor import DetectionField, detect_prob_mixture
from src.utils.exceptions import InfeasiblePathError, InvalidArgumentError
from tests.conftest import density_mixture, gaussian

BOUNDS = (1.3, np.pi / 2)


def _objective(sensor, belief=None, kernels=()):
    return PathObjective(
        belief=GaussianMixture.empty(2) if belief is None else belief,
        tracked_kernels=list(kernels),
        sensor=sensor,
    )


def _straight(start, goal, T=2.0, n=21):
    times = np.linspace(0.0, T, n)
    start, goal = np.asarray(start, dtype=float), np.asarray(goal, dtype=float)
    offset = goal - start
    heading = np.arctan2(offset[1], offset[0])
    positions = start + np.outer(times / T, offset)
    states = np.column_stack([positions, np.full(n, heading)])
    controls = np.tile([np.linalg.norm(offset) / T, 0.0], (n, 1))
    return Trajectory.from_arrays(times, states, controls)


def _problem(sensor, field=None, goal=(1.0, 0.5), goal_heading=None, n=7):
    return planner_low.TranscriptionProblem(
        UnicycleState(x=0.0, y=0.0, theta=0.1),
        np.array(goal),
        goal_heading,
        DetectionField.empty() if field is None else field,
        1.3,
        np.pi / 2,
        2.0,
        n,
    )


def _finite_difference(fun, z, eps=1e-6):
    grad = np.zeros_like(z)
    for i in range(z.size):
        step = np.zeros_like(z)
        step[i] = eps
        grad[i] = (fun(z + step) - fun(z - step)) / (2.0 * eps)
    return grad


class TestSolvePath:
    def test_full_authority_is_straight(self, sensor):
        start = UnicycleState(x=0.0, y=0.0, theta=0.0)
        traj = planner_low.solve_path(start, ([2.6, 0.0], None), _objective(sensor), BOUNDS, T=2.0, rng_seed=0)
        assert traj.converged
        assert traj.max_defect <= 1e-4
        assert traj.terminal_residual <= 1e-4
        np.testing.assert_allclose(traj.positions[-1], [2.6, 0.0], atol=1e-4)
        assert np.abs(traj.positions[:, 1]).max() < 1e-3
        np.testing.assert_allclose(traj.controls[:, 0], 1.3, atol=1e-3)

    def test_goal_beyond_reach(self, sensor):
        start = UnicycleState(x=0.0, y=0.0, theta=0.0)
        with pytest.raises(InfeasiblePathError):
            planner_low.solve_path(start, ([3.0, 0.0], None), _objective(sensor), BOUNDS, T=2.0)

    def test_bad_knot_count(self, sensor):
        start = UnicycleState(x=0.0, y=0.0, theta=0.0)
        with pytest.raises(InvalidArgumentError):
            planner_low.solve_path(start, ([1.0, 0.0], None), _objective(sensor), BOUNDS, T=2.0, n_knots=3)

    def test_excess_authority_strays_toward_peak(self, sensor):
        belief = density_mixture([1.0], [[1.0, 1.0]], [0.3 * np.eye(2)])
        obj = _objective(sensor, belief)
        start = UnicycleState(x=0.0, y=0.0, theta=0.0)
        traj = planner_low.solve_path(start, ([2.0, 0.0], None), obj, (1.2, np.pi / 2), T=2.0, rng_seed=0)
        baseline = planner_low.objective_along_path(obj, _straight([0.0, 0.0], [2.0, 0.0]))
        assert traj.converged
        assert traj.max_defect <= 1e-4
        assert traj.terminal_residual <= 1e-4
        assert traj.objective > baseline
        assert traj.positions[:, 1].max() > 0.05
        assert np.all(traj.controls[:, 0] <= 1.2 + 1e-9)

    def test_viewpoint_goal_with_heading(self, sensor):
        start = UnicycleState(x=0.0, y=0.0, theta=0.0)
        goal = Viewpoint(position=[1.0, 1.0], heading=np.pi / 2)
        traj = planner_low.solve_path(start, goal, _objective(sensor), BOUNDS, T=2.0,
                                      terminal_heading=True, rng_seed=0)
        assert traj.terminal_residual <= 1e-4
        assert traj.states[-1, 2] == pytest.approx(np.pi / 2, abs=1e-4)

    def test_time_offset_and_warm_start(self, sensor):
        belief = density_mixture([1.0], [[1.0, 0.8]], [0.3 * np.eye(2)])
        obj = _objective(sensor, belief)
        start = UnicycleState(x=0.0, y=0.0, theta=0.0)
        first = planner_low.solve_path(start, ([2.0, 0.0], None), obj, BOUNDS, T=2.0, rng_seed=0)
        moved = UnicycleState.from_array(first.states[1])
        second = planner_low.solve_path(moved, ([2.0, 0.0], None), obj, BOUNDS, T=2.0, rng_seed=0,
                                        warm_start=first, t0=0.1)
        assert second.times[0] == pytest.approx(0.1)
        assert second.times[-1] == pytest.approx(2.1)
        assert second.terminal_residual <= 1e-4

    def test_moving_kernel_pulls_path(self, sensor):
        kernel = TrackedKernel(belief=gaussian([0.0, 1.0], 0.05), velocity=[1.0, 0.0], weight=1.0)
        obj = _objective(sensor, kernels=[kernel])
        start = UnicycleState(x=0.0, y=0.0, theta=0.0)
        traj = planner_low.solve_path(start, ([2.0, 0.0], None), obj, BOUNDS, T=2.0, rng_seed=0)
        baseline = planner_low.objective_along_path(obj, _straight([0.0, 0.0], [2.0, 0.0]))
        assert traj.objective > baseline
        assert traj.positions[:, 1].max() > 0.05

    def test_replan_without_new_information_is_stable(self, sensor):
        belief = density_mixture([1.0], [[1.0, 0.8]], [0.3 * np.eye(2)])
        obj = _objective(sensor, belief)
        start = UnicycleState(x=0.0, y=0.0, theta=0.0)
        first = planner_low.solve_path(start, ([2.0, 0.0], None), obj, BOUNDS, T=2.0, rng_seed=0)
        assert first.multipliers is not None
        moved = UnicycleState.from_array(first.states[1])
        second = planner_low.solve_path(moved, ([2.0, 0.0], None), obj, BOUNDS, T=1.9, n_knots=20,
                                        rng_seed=0, warm_start=first, t0=0.1)
        np.testing.assert_allclose(second.times, first.times[1:], atol=1e-9)
        assert second.converged
        drift = np.linalg.norm(second.positions - first.positions[1:], axis=1).max()
        assert drift <= 0.05

    def test_multipliers_follow_the_shifted_grid(self, sensor):
        problem = _problem(sensor, n=7)
        shorter = planner_low.TranscriptionProblem(
            UnicycleState(x=0.0, y=0.0, theta=0.1), np.array([1.0, 0.5]), None, DetectionField.empty(),
            1.3, np.pi / 2, problem.h * 5, 6,
        )
        z = planner_low.arc_seed(problem)
        states, controls = problem.unpack(z)
        lam = np.arange(problem.n_constraints, dtype=float)
        previous = Trajectory.from_arrays(problem.taus, states, controls, multipliers=lam, penalty=100.0)
        shifted = planner_low._shifted_multipliers(shorter, previous, problem.h)
        assert shifted.shape == (shorter.n_constraints,)
        np.testing.assert_array_equal(shifted[:15], lam[3:18])
        np.testing.assert_array_equal(shifted[15:], lam[18:])
        assert planner_low._shifted_multipliers(problem, previous, problem.h) is None

    @pytest.mark.slow
    def test_more_authority_strays_further(self, sensor):
        belief = density_mixture([1.0], [[1.0, 2.0]], [0.5 * np.eye(2)])
        obj = _objective(sensor, belief)
        start = UnicycleState(x=0.0, y=0.0, theta=0.0)
        results = {}
        for speed in (1.3, 1.8, 3.3):
            traj = planner_low.solve_path(start, ([2.0, 0.0], None), obj, (speed, np.pi / 2), T=2.0, rng_seed=0)
            assert traj.max_defect <= 1e-4
            results[speed] = (traj.objective, planner_low.path_metrics(traj, [0.0, 0.0], [2.0, 0.0]))
        assert results[3.3][0] >= results[1.3][0] - 1e-9
        assert results[3.3][1]["max_lateral_deviation"] > results[1.3][1]["max_lateral_deviation"]
        assert results[3.3][1]["path_length"] > results[1.3][1]["path_length"]


class TestTranscription:
    def test_objective_gradient(self, sensor, rng):
        belief = density_mixture([0.6, 0.4], [[0.8, 0.4], [0.2, 1.0]], [0.2 * np.eye(2), 0.4 * np.eye(2)])
        field = DetectionField.for_mixture(sensor, np.zeros((2, 2)), belief)
        problem = _problem(sensor, field)
        z = planner_low.arc_seed(problem) + rng.normal(scale=0.1, size=problem.size)
        _, grad = problem.objective(z)
        fd = _finite_difference(lambda x: problem.objective(x)[0], z)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-8)

    def test_augmented_gradient(self, sensor, rng):
        belief = density_mixture([1.0], [[0.6, 0.6]], [0.3 * np.eye(2)])
        field = DetectionField.for_mixture(sensor, np.zeros((2, 2)), belief)
        problem = _problem(sensor, field, goal_heading=0.7)
        z = planner_low.arc_seed(problem) + rng.normal(scale=0.1, size=problem.size)
        lam = rng.normal(size=problem.constraints(z).shape[0])
        _, grad = problem.augmented(z, lam, 10.0)
        fd = _finite_difference(lambda x: problem.augmented(x, lam, 10.0)[0], z)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-7)

    def test_arc_seed_is_feasible(self, sensor):
        problem = _problem(sensor, goal=(1.0, 1.0), n=21)
        z = planner_low.arc_seed(problem)
        assert problem.max_defect(z) < 1e-12
        assert problem.terminal_residual(z) < 1e-9
        assert problem.within_bounds(z)
        states, controls = problem.unpack(z)
        np.testing.assert_allclose(planner_low.trapezoid_defects(states, controls, problem.h), 0.0, atol=1e-12)

    def test_arc_seed_in_place(self, sensor):
        problem = _problem(sensor, goal=(0.0, 0.0))
        z = planner_low.arc_seed(problem)
        _, controls = problem.unpack(z)
        np.testing.assert_allclose(controls, 0.0)
        assert problem.violation(z) < 1e-12

    def test_objective_matches_pointwise_detection(self, sensor):
        belief = density_mixture([0.7, 0.3], [[1.0, 0.5], [0.0, 1.5]], [0.2 * np.eye(2), 0.5 * np.eye(2)])
        obj = _objective(sensor, belief)
        traj = _straight([0.0, 0.0], [2.0, 1.0])
        values = np.array([detect_prob_mixture(sensor, p, np.zeros((2, 2)), belief) for p in traj.positions])
        weights = np.ones(len(values))
        weights[[0, -1]] = 0.5
        expected = traj.dt_knot * weights @ values
        assert planner_low.objective_along_path(obj, traj) == pytest.approx(expected, rel=1e-10)

    def test_path_through_peak_beats_offset_path(self, sensor):
        obj = _objective(sensor, density_mixture([1.0], [[1.0, 0.0]], [0.05 * np.eye(2)]))
        through = planner_low.objective_along_path(obj, _straight([0.0, 0.0], [2.0, 0.0]))
        offset = planner_low.objective_along_path(obj, _straight([0.0, 3.0 * 0.55], [2.0, 3.0 * 0.55]))
        assert through > offset

    def test_empty_objective_is_zero(self, sensor):
        assert planner_low.objective_along_path(_objective(sensor), _straight([0.0, 0.0], [1.0, 0.0])) == 0.0

    def test_zero_belief_path_scores_zero(self, sensor):
        start = UnicycleState(x=0.0, y=0.0, theta=0.0)
        traj = planner_low.solve_path(start, ([1.0, 0.0], None), _objective(sensor), BOUNDS, T=2.0, rng_seed=0)
        assert traj.objective == 0.0
        assert traj.terminal_residual <= 1e-4
        assert np.abs(traj.positions[:, 1]).max() < 1e-3


class TestControls:
    @pytest.fixture
    def ramp(self):
        times = np.array([0.0, 1.0, 2.0])
        states = np.zeros((3, 3))
        controls = np.array([[0.0, 0.2], [1.0, 0.0], [0.4, -0.2]])
        return Trajectory.from_arrays(times, states, controls)

    def test_knot_value(self, ramp):
        control = planner_low.extract_control(ramp, 1.0)
        assert control.v == pytest.approx(1.0)
        assert control.omega == pytest.approx(0.0)

    def test_interpolates_between_knots(self, ramp):
        control = planner_low.extract_control(ramp, 0.5)
        assert control.v == pytest.approx(0.5)
        assert control.omega == pytest.approx(0.1)

    @pytest.mark.parametrize("t", [-0.1, 2.5])
    def test_outside_span(self, ramp, t):
        with pytest.raises(InvalidArgumentError):
            planner_low.extract_control(ramp, t)


class TestHelpers:
    def test_corridor_metrics(self):
        positions = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]])
        metrics = planner_low.corridor_metrics(positions, [0.0, 0.0], [2.0, 0.0])
        assert metrics["path_length"] == pytest.approx(2.0 * np.sqrt(2.0))
        assert metrics["max_lateral_deviation"] == pytest.approx(1.0)

    def test_plan_paths_drops_infeasible(self, sensor):
        obj = _objective(sensor)
        jobs = [
            {"robot_id": 0, "start": UnicycleState(x=0.0, y=0.0), "goal": ([1.0, 0.0], None), "obj": obj,
             "bounds": BOUNDS, "T": 2.0},
            {"robot_id": 1, "start": UnicycleState(x=0.0, y=0.0), "goal": ([9.0, 0.0], None), "obj": obj,
             "bounds": BOUNDS, "T": 2.0},
        ]
        paths = planner_low.plan_paths(jobs, workers=2)
        assert set(paths) == {0}
        np.testing.assert_allclose(paths[0].positions[-1], [1.0, 0.0], atol=1e-4)
