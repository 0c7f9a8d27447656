"""
Closed-loop scenario runner: observations -> JET step -> truth update
"""
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from src.models.jet import InformationState, ObservationKind
from src.models.planning import AgentState
from src.models.scenario import MetricsLog, ScenarioConfig
from src.models.tracking import KalmanTrack, LtiModel
from src.agents.planner_low import corridor_metrics
from src.orchestration.jet import JetPlanner
from src.services import gaussmix
from src.simulation.world import advance_truth, generate_observations, initial_truth, uniform_prior
from src.utils.config import get_settings
from src.utils.logger import get_logger
from src.utils.rng import as_generator, derive_seed

logger = get_logger(__name__)


def build_team(config: ScenarioConfig) -> List[AgentState]:
    return [
        AgentState(id=i, pose=spec.pose, cov=spec.cov, v_max=spec.v_max, omega_max=spec.omega_max)
        for i, spec in enumerate(config.robots)
    ]


def known_tracks(config: ScenarioConfig, model: LtiModel) -> Tuple[List[KalmanTrack], Dict[str, int]]:
    """
    Objects tracked from the start, at their true state with the measurement
    covariance on position and the spawn-time velocity prior on velocity.
    """
    tracks, labels = [], {}
    for obj in config.objects:
        if obj.label not in config.known_objects:
            continue
        track_id = len(tracks)
        cov = np.zeros((model.n_a, model.n_a))
        cov[:2, :2] = model.R
        cov[2:, 2:] = config.object_speed**2 * np.eye(model.n_a - 2)
        tracks.append(KalmanTrack(id=track_id, mean=obj.state, cov=cov, model=model))
        labels[obj.label] = track_id
    return tracks, labels


def _horizon_checks(state: InformationState, observations, time: float) -> List[dict]:
    if state.nbv is None:
        return []
    labels = {track_id: label for label, track_id in state.label_map.items()}
    checks = []
    for track_id, robot_id in sorted(state.assignment.pairs.items()):
        label = labels.get(track_id)
        detected = any(
            o.robot_id == robot_id and o.kind == ObservationKind.DETECTION and o.label == label
            for o in observations
        )
        checks.append({
            "time": time,
            "track_id": track_id,
            "robot_id": robot_id,
            "planned_ok": bool(state.nbv.jensen_ok.get(robot_id, False)),
            "planned_prob": float(state.nbv.terminal_detect_prob.get(robot_id, 0.0)),
            "detected": detected,
            "fallback": robot_id in state.modes,
        })
    return checks


def run_scenario(
    config: ScenarioConfig,
    seed: Optional[int] = None,
    log: Optional[MetricsLog] = None,
    on_step: Optional[Callable[[MetricsLog], None]] = None,
) -> MetricsLog:
    """
    Run the closed loop for config.duration seconds. Appends into `log` when
    given so a caller keeps partial results if a step raises.
    """
    settings = get_settings()
    seed = config.seed if seed is None else seed
    params = config.params.model_copy(update={"seed": seed})
    log = log if log is not None else MetricsLog()
    log.scenario, log.seed = config.name, seed
    log.known_labels = list(config.known_objects)

    object_model = config.object_model.build(params.dt)
    planner = JetPlanner(config.sensor, object_model, params, config.object_speed)
    prior = config.prior if config.prior is not None else uniform_prior(config.arena)
    tracks, labels = known_tracks(config, object_model)
    state = planner.initial_state(build_team(config), prior, tracks, labels)
    truth = initial_truth(config)

    truth_rng = as_generator(derive_seed(seed, 1))
    sense_rng = as_generator(derive_seed(seed, 2))
    logger.info("Scenario started", name=config.name, seed=seed, steps=config.steps,
                robots=len(config.robots), objects=len(config.objects))

    for k in range(config.steps):
        sensed = k % config.sense_every == 0
        per_robot = generate_observations(truth, config.sensor, object_model.R, sense_rng) if sensed else {}
        observations = [o for robot_id in sorted(per_robot) for o in per_robot[robot_id]]
        if k > 0 and state.step_index % params.horizon_steps == 0:
            log.horizon_checks.extend(_horizon_checks(state, observations, state.time))

        state, controls = planner.step(state, observations, sensed)
        record = state.last_record
        log.records.append(record)
        _log_step(log, record, state, truth, k, settings)

        truth = advance_truth(
            truth,
            controls,
            object_model,
            params.dt,
            truth_rng,
            robot_process_noise=config.robot_process_noise,
            deterministic_objects=config.deterministic_objects,
        )
        if settings.heatmap_every and k % settings.heatmap_every == 0 and len(state.untracked_belief):
            xs, ys, grid = gaussmix.density_grid(state.untracked_belief, config.arena.bounds,
                                                 settings.heatmap_resolution)
            log.heatmaps.append({"step": k, "time": record.time, "bounds": list(config.arena.bounds),
                                 "resolution": settings.heatmap_resolution, "grid": grid.tolist()})
        if on_step is not None:
            on_step(log)

    log.completed = True
    logger.info("Scenario finished", name=config.name, discovered=len(log.discovery_times),
                objects=len(config.objects), warnings=len(log.warnings))
    return log


def _log_step(log: MetricsLog, record, state: InformationState, truth, k: int, settings) -> None:
    labels = {track_id: label for label, track_id in state.label_map.items()}
    for track_id in record.discoveries:
        label = labels.get(track_id)
        if label is not None and label not in log.discovery_times:
            log.discovery_times[label] = record.time

    roles = state.assignment.robot_to_track()
    for robot_id, pose in sorted(record.robot_poses.items()):
        control = record.controls.get(robot_id, [0.0, 0.0])
        true_pose = truth.robot_poses[robot_id]
        log.steps.append({
            "step": record.step,
            "time": record.time,
            "robot_id": robot_id,
            "x": pose[0],
            "y": pose[1],
            "theta": pose[2],
            "true_x": true_pose.x,
            "true_y": true_pose.y,
            "v": control[0],
            "omega": control[1],
            "mode": record.modes.get(robot_id, "jet"),
            "role": "explore" if robot_id not in roles else f"track:{roles[robot_id]}",
            "tracks": len(record.tracks),
            "belief_mass": record.belief_mass,
            "belief_components": record.belief_components,
        })
    for track in record.tracks:
        log.cov_norms.append({"step": record.step, "time": record.time,
                              "track_id": track["id"], "cov_norm": track["cov_norm"]})
    log.objective_trace.append({
        "step": record.step,
        "time": record.time,
        "nbv_objective": record.nbv_objective,
        "path_objective": float(sum(record.path_objectives.values())),
        "belief_mass": record.belief_mass,
    })
    log.warnings.extend(f"t={record.time:.2f}: {w}" for w in record.warnings)
    if settings.plan_log_every and k % settings.plan_log_every == 0:
        for robot_id, traj in sorted(state.trajectories.items()):
            for row in traj.to_rows(robot_id):
                log.plans.append({"step": record.step, **row})


def cov_norm_series(log: MetricsLog, track_id: int) -> List[float]:
    return [row["cov_norm"] for row in log.cov_norms if row["track_id"] == track_id]


def realized_path_metrics(log: MetricsLog, robot_id: int = 0) -> Dict[str, float]:
    """Length and lateral deviation of a robot's realized path from its start-end corridor."""
    points = np.array([[row["x"], row["y"]] for row in log.steps if row["robot_id"] == robot_id])
    if len(points) < 2:
        return {"path_length": 0.0, "max_lateral_deviation": 0.0}
    return corridor_metrics(points, points[0], points[-1])
