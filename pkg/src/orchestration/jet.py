"""
Joint exploration and tracking loop

One call to JetPlanner.step consumes the observations taken at the current
time, updates tracks and the untracked-object belief, re-solves assignment
and viewpoints when a horizon starts or an object is discovered, re-plans
every robot's path and returns the controls to apply for the next step.
"""
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.agents.planner_high import solve_assignment, solve_nbv
from src.agents.planner_low import extract_control, plan_paths
from src.models.gaussian import GaussianMixture
from src.models.jet import (
    InformationState,
    JetParams,
    Observation,
    ObservationKind,
    RobotMode,
    StepRecord,
    SwitchingEvent,
)
from src.models.planning import (
    AgentState,
    AssignmentResult,
    ControlInput,
    PathObjective,
    TrackedKernel,
    UnicycleState,
    Viewpoint,
    wrap_angle,
)
from src.models.sensor import SensorModel
from src.models.tracking import KalmanTrack, LtiModel
from src.services import gaussmix, kinematics, tracker
from src.services.sensor import detect_prob_mixture, miss_kernel_in_object_space
from src.utils.config import get_settings
from src.utils.exceptions import InfeasibleAssignmentError
from src.utils.logger import get_logger
from src.utils.rng import derive_seed

logger = get_logger(__name__)


def detect_switching_events(prev: AssignmentResult, new: AssignmentResult) -> List[SwitchingEvent]:
    """Robots whose role (tracking a given object, or exploring) changed."""
    robots = set(prev.robot_to_track()) | set(prev.unassigned_robots)
    robots |= set(new.robot_to_track()) | set(new.unassigned_robots)
    events = []
    for robot_id in sorted(robots):
        old_role, new_role = prev.role_of(robot_id), new.role_of(robot_id)
        if old_role != new_role:
            events.append(SwitchingEvent(robot_id=robot_id, old_role=old_role, new_role=new_role))
    return events


def hybrid_fallback(
    state: InformationState,
    infeasible_track_ids: Sequence[int],
    params: Optional[JetParams] = None,
) -> Dict[int, RobotMode]:
    """Pursuit mode for the robot assigned to each track whose constraint is infeasible."""
    owners = state.assignment.pairs
    modes = {}
    for track_id in infeasible_track_ids:
        robot_id = owners.get(track_id)
        if robot_id is not None:
            modes[robot_id] = RobotMode.PURSUIT
    if modes:
        logger.warning("Hybrid fallback engaged", robots=sorted(modes), track_ids=list(infeasible_track_ids))
    return modes


def pursuit_control(robot: AgentState, target, gain: float) -> ControlInput:
    """Drive at the target: full speed when facing it, slow turn-in otherwise."""
    offset = np.asarray(target, dtype=float) - robot.position
    error = wrap_angle(np.arctan2(offset[1], offset[0]) - robot.pose.theta)
    v = robot.v_max * max(np.cos(error), 0.2)
    omega = float(np.clip(gain * error, -robot.omega_max, robot.omega_max))
    return ControlInput(v=float(v), omega=omega)


class JetPlanner:
    """Runs the loop for one team with a fixed sensor and object model"""

    def __init__(
        self,
        sensor: SensorModel,
        object_model: LtiModel,
        params: JetParams,
        object_speed: float = 1.0,
    ):
        settings = get_settings()
        self.sensor = sensor
        self.object_model = object_model
        self.params = params
        self.object_speed = object_speed
        self.max_components = params.max_components or settings.max_components
        self.sample_budget = params.refit_sample_budget or settings.refit_sample_budget
        self.workers = params.workers or settings.workers
        logger.info("JetPlanner initialized", horizon=params.T, dt=params.dt, alpha=params.alpha,
                    max_components=self.max_components)

    def initial_state(
        self,
        robots: List[AgentState],
        prior: GaussianMixture,
        tracks: Optional[List[KalmanTrack]] = None,
        labels: Optional[Dict[str, int]] = None,
    ) -> InformationState:
        return InformationState(
            time=0.0,
            robots=robots,
            tracks=list(tracks or []),
            untracked_belief=gaussmix.reduce_mixture(prior, self.max_components) if len(prior) else prior,
            label_map=dict(labels or {}),
            control_history={r.id: [] for r in robots},
        )

    # ==================== Belief updates ====================

    def _negative_update(self, belief: GaussianMixture, kernel: GaussianMixture, seed: int) -> GaussianMixture:
        if len(belief) == 0 or not belief.total_integral() > 0.0:
            return belief
        signed = gaussmix.negative_update(belief, kernel)
        if not signed.total_integral() > 0.0:
            return GaussianMixture.empty(belief.dim)
        return gaussmix.refit_mixture(signed, self.max_components, self.sample_budget, seed)

    def _overlap(self, belief: GaussianMixture, robot: AgentState) -> float:
        if len(belief) == 0 or not belief.total_integral() > 0.0:
            return 0.0
        return detect_prob_mixture(self.sensor, robot.position, robot.cov, belief)

    def _discovery_kernel(self, measurement: np.ndarray) -> GaussianMixture:
        covs = self.sensor.covs + self.object_model.R[None]
        weights = self.sensor.zetas * np.sqrt(np.linalg.det(self.sensor.covs) / np.linalg.det(covs))
        means = np.repeat(measurement[None], self.sensor.n_s, axis=0)
        return GaussianMixture.from_arrays(weights, means, covs)

    def _update_beliefs(self, state: InformationState, observations: Sequence[Observation], sensed: bool):
        tracks = {t.id: t for t in state.tracks}
        labels = dict(state.label_map)
        belief = state.untracked_belief
        discoverers, discoveries = set(), []

        for obs in observations:
            if obs.kind != ObservationKind.DETECTION:
                continue
            measurement = np.asarray(obs.measurement, dtype=float)
            track_id = labels.get(obs.label)
            if track_id is not None:
                tracks[track_id] = tracker.update(tracks[track_id], measurement, state.time)
                continue
            track_id = max(tracks) + 1 if tracks else 0
            tracks[track_id] = tracker.spawn_track(
                track_id, measurement, self.object_model, self.object_speed, state.time
            )
            labels[obs.label] = track_id
            discoverers.add(obs.robot_id)
            discoveries.append(track_id)
            seed = derive_seed(self.params.seed, state.step_index, 1000 + track_id)
            belief = self._negative_update(belief, self._discovery_kernel(measurement), seed)
            logger.info("Object discovered", track_id=track_id, robot_id=obs.robot_id, time=round(state.time, 3))

        for robot in state.robots:
            if not sensed or robot.id in discoverers:
                continue
            if self._overlap(belief, robot) < self.params.min_overlap:
                continue
            kernel = miss_kernel_in_object_space(self.sensor, robot.position, robot.cov)
            seed = derive_seed(self.params.seed, state.step_index, robot.id)
            belief = self._negative_update(belief, kernel, seed)

        ordered = [tracks[i] for i in sorted(tracks)]
        return ordered, labels, belief, discoveries

    # ==================== Horizon layer ====================

    def _assign(self, robots, tracks, time_to_go: float, warnings: List[str]) -> Tuple[AssignmentResult, List[int]]:
        remaining = list(tracks)
        orphans: List[int] = []
        while True:
            try:
                result = solve_assignment(robots, remaining, time_to_go, self.params.dt)
                break
            except InfeasibleAssignmentError as exc:
                warnings.append(str(exc))
                orphans.extend(exc.track_ids)
                remaining = [t for t in remaining if t.id not in exc.track_ids]
        if not orphans:
            return result, []

        # Orphaned tracks go to the nearest free robot, which will pursue them
        pairs = dict(result.pairs)
        free = [r for r in robots if r.id in result.unassigned_robots]
        by_id = {t.id: t for t in tracks}
        for track_id in orphans:
            if not free:
                break
            target = by_id[track_id].position()
            nearest = min(free, key=lambda r: float(np.linalg.norm(r.position - target)))
            pairs[track_id] = nearest.id
            free.remove(nearest)
        assigned = set(pairs.values())
        return AssignmentResult(
            pairs=pairs,
            unassigned_robots=[r.id for r in robots if r.id not in assigned],
            cost=result.cost,
        ), orphans

    # ==================== Step ====================

    def step(
        self,
        state: InformationState,
        observations: Sequence[Observation],
        sensed: bool = True,
    ) -> Tuple[InformationState, Dict[int, ControlInput]]:
        """`sensed` is false on steps without a sensing instant (no negative information)."""
        params = self.params
        warnings: List[str] = []
        tracks, labels, belief, discoveries = self._update_beliefs(state, observations, sensed)

        modes = dict(state.modes)
        for robot_id, mode in list(modes.items()):
            track_id = state.assignment.robot_to_track().get(robot_id)
            if track_id is None:
                del modes[robot_id]
                continue
            track = next(t for t in tracks if t.id == track_id)
            if tracker.covariance_norm(track.cov, track.model.H) < params.recovery_threshold:
                logger.info("Track recovered, leaving pursuit", robot_id=robot_id, track_id=track_id)
                del modes[robot_id]

        boundary = state.step_index % params.horizon_steps == 0
        recovered = len(modes) < len(state.modes)
        replan = boundary or bool(discoveries) or state.nbv is None or recovered
        anchor = state.time if boundary else state.horizon_anchor
        time_to_go = anchor + params.T - state.time

        assignment, nbv = state.assignment, state.nbv
        switching: List[SwitchingEvent] = []
        if replan:
            assignment, orphans = self._assign(state.robots, tracks, time_to_go, warnings)
            nbv = solve_nbv(
                belief,
                state.robots,
                tracks,
                assignment,
                self.sensor,
                params,
                rng_seed=derive_seed(params.seed, state.step_index, 7),
                time_to_go=time_to_go,
            )
            old_roles, new_roles = state.assignment.robot_to_track(), assignment.robot_to_track()
            modes = {r: m for r, m in modes.items() if r in new_roles and new_roles[r] == old_roles.get(r)}
            switching = detect_switching_events(state.assignment, assignment)
            for event in switching:
                logger.info("Role switch", robot_id=event.robot_id, old=event.old_role, new=event.new_role)
            infeasible = sorted(set(nbv.infeasible_track_ids) | set(orphans))
            provisional = state.model_copy(update={"assignment": assignment})
            modes.update(hybrid_fallback(provisional, infeasible, params))

        controls, trajectories, path_objectives = self._plan(
            state, tracks, belief, nbv, assignment, modes, time_to_go, warnings
        )

        record = StepRecord(
            step=state.step_index,
            time=state.time,
            replanned=replan,
            horizon_boundary=boundary,
            robot_poses={r.id: r.pose.as_array().tolist() for r in state.robots},
            tracks=[
                {"id": t.id, "mean": t.mean.tolist(), "cov": t.cov.tolist(),
                 "cov_norm": tracker.covariance_norm(t.cov, t.model.H)}
                for t in tracks
            ],
            belief_components=len(belief),
            belief_mass=belief.total_integral() if len(belief) else 0.0,
            belief=[c.model_dump() for c in belief.components],
            assignment=dict(assignment.pairs),
            viewpoints={k: v.position.tolist() + [v.heading] for k, v in nbv.viewpoints.items()},
            modes={k: v.value for k, v in modes.items()},
            switching_events=switching,
            jensen_checks={k: v for k, v in nbv.jensen_ok.items() if k not in modes},
            terminal_detect_prob=dict(nbv.terminal_detect_prob),
            nbv_objective=nbv.objective_value,
            path_objectives=path_objectives,
            controls={k: [u.v, u.omega] for k, u in controls.items()},
            discoveries=discoveries,
            warnings=warnings,
        )

        next_state = self._advance(
            state, tracks, labels, belief, assignment, nbv, trajectories, modes, controls, anchor, record
        )
        return next_state, controls

    def _plan(self, state, tracks, belief, nbv, assignment, modes, time_to_go, warnings):
        params = self.params
        robot_to_track = assignment.robot_to_track()
        kernels = [
            TrackedKernel(belief=t.position_belief(), velocity=t.velocity(), weight=params.tracked_weight)
            for t in tracks
        ]
        knots = max(5, int(round(time_to_go / params.dt)) + 1)

        controls: Dict[int, ControlInput] = {}
        jobs = []
        for robot in state.robots:
            if modes.get(robot.id) == RobotMode.PURSUIT:
                track = next(t for t in tracks if t.id == robot_to_track[robot.id])
                target = track.position() + track.velocity() * params.dt
                controls[robot.id] = pursuit_control(robot, target, params.pursuit_gain)
                continue
            goal = nbv.viewpoints[robot.id]
            reach = robot.v_max * time_to_go
            offset = goal.position - robot.position
            distance = float(np.linalg.norm(offset))
            if distance > reach * (1.0 - 1e-6):
                clipped = robot.position + offset * (reach * 0.999 / distance)
                warnings.append(f"robot {robot.id}: viewpoint beyond remaining reach, goal clipped")
                goal = Viewpoint(position=clipped, heading=goal.heading)
            jobs.append({
                "robot_id": robot.id,
                "start": robot.pose,
                "goal": goal,
                "obj": PathObjective(belief=belief, tracked_kernels=kernels, sensor=self.sensor, robot_cov=robot.cov),
                "bounds": (robot.v_max, robot.omega_max),
                "T": time_to_go,
                "n_knots": knots,
                "rng_seed": derive_seed(params.seed, state.step_index, 100 + robot.id),
                "terminal_heading": params.terminal_heading,
                "warm_start": state.trajectories.get(robot.id),
                "t0": state.time,
            })

        trajectories = plan_paths(jobs, self.workers)
        path_objectives = {}
        for job in jobs:
            robot_id = job["robot_id"]
            traj = trajectories.get(robot_id)
            if traj is None:
                robot = state.robot(robot_id)
                warnings.append(f"robot {robot_id}: no feasible path, steering at the viewpoint")
                controls[robot_id] = pursuit_control(robot, job["goal"].position, params.pursuit_gain)
                continue
            if traj.warning:
                warnings.append(f"robot {robot_id}: {traj.warning}")
            path_objectives[robot_id] = traj.objective
            controls[robot_id] = extract_control(traj, state.time + 0.5 * params.dt)
        return controls, trajectories, path_objectives

    def _advance(self, state, tracks, labels, belief, assignment, nbv, trajectories, modes, controls, anchor, record):
        params = self.params
        robots = []
        for robot in state.robots:
            control = controls[robot.id]
            pose = kinematics.step(robot.pose, control, params.dt)
            fix = state.pose_fixes.get(robot.id)
            if fix is not None:
                pose = UnicycleState.from_array(fix)
            robots.append(robot.model_copy(update={"pose": pose}))

        history = {k: list(v) for k, v in state.control_history.items()}
        for robot_id, control in controls.items():
            history.setdefault(robot_id, []).append(control)

        next_belief = belief
        if len(belief):
            next_belief = gaussmix.diffuse(belief, params.untracked_diffusion, params.dt)
            next_belief = gaussmix.reduce_mixture(next_belief, self.max_components)

        return state.model_copy(update={
            "time": round(state.time + params.dt, 12),
            "step_index": state.step_index + 1,
            "horizon_anchor": anchor,
            "robots": robots,
            "tracks": [tracker.predict(t, 1) for t in tracks],
            "untracked_belief": next_belief,
            "control_history": history,
            "label_map": labels,
            "assignment": assignment,
            "nbv": nbv,
            "trajectories": trajectories,
            "modes": modes,
            "pose_fixes": {},
            "last_record": record,
        })


def step(
    planner: JetPlanner,
    state: InformationState,
    observations: Sequence[Observation],
    sensed: bool = True,
) -> Tuple[InformationState, Dict[int, ControlInput]]:
    return planner.step(state, observations, sensed)
