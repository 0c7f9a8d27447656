"""
Ground-truth world: true robot / object motion and stochastic sensing
"""
from typing import Dict, List

import numpy as np

from src.models.gaussian import GaussianMixture
from src.models.jet import Observation, ObservationKind
from src.models.planning import ControlInput, UnicycleState
from src.models.scenario import Arena, ScenarioConfig, TruthState
from src.models.sensor import SensorModel
from src.models.tracking import LtiModel
from src.services import kinematics
from src.services.sensor import sample_detection
from src.utils.logger import get_logger
from src.utils.rng import SeedLike, as_generator

logger = get_logger(__name__)


def initial_truth(config: ScenarioConfig) -> TruthState:
    return TruthState(
        time=0.0,
        robot_poses={i: spec.pose for i, spec in enumerate(config.robots)},
        object_states={obj.label: obj.state.copy() for obj in config.objects},
    )


def advance_truth(
    truth: TruthState,
    controls: Dict[int, ControlInput],
    object_model: LtiModel,
    dt: float,
    rng_seed: SeedLike = None,
    robot_process_noise: float = 0.0,
    deterministic_objects: bool = False,
) -> TruthState:
    """Robots move along exact unicycle arcs, objects take one noisy LTI step."""
    rng = as_generator(rng_seed)
    poses = {}
    for robot_id in sorted(truth.robot_poses):
        pose = truth.robot_poses[robot_id]
        control = controls.get(robot_id, ControlInput())
        nxt = kinematics.step(pose, control, dt)
        if robot_process_noise > 0.0:
            noise = rng.normal(0.0, np.sqrt(robot_process_noise * dt), size=2)
            nxt = UnicycleState(x=nxt.x + noise[0], y=nxt.y + noise[1], theta=nxt.theta)
        poses[robot_id] = nxt

    factor = np.linalg.cholesky(object_model.Q + 1e-15 * np.eye(object_model.n_a))
    objects = {}
    for label in sorted(truth.object_states):
        state = object_model.F @ truth.object_states[label]
        if not deterministic_objects:
            state = state + factor @ rng.standard_normal(object_model.n_a)
        objects[label] = state

    return TruthState(time=round(truth.time + dt, 12), robot_poses=poses, object_states=objects)


def generate_observations(
    truth: TruthState,
    sensor: SensorModel,
    measurement_cov: np.ndarray,
    rng_seed: SeedLike = None,
) -> Dict[int, List[Observation]]:
    """
    Per robot and object, a Bernoulli detection at the true relative position.
    Detections carry a noisy position measurement; a robot that detects
    nothing reports a single miss.
    """
    rng = as_generator(rng_seed)
    factor = np.linalg.cholesky(np.asarray(measurement_cov, dtype=float))
    observations: Dict[int, List[Observation]] = {}
    for robot_id in sorted(truth.robot_poses):
        robot = truth.robot_poses[robot_id].position
        found = []
        for label in sorted(truth.object_states):
            position = truth.object_states[label][:2]
            if sample_detection(sensor, robot, position, rng):
                z = position + factor @ rng.standard_normal(2)
                found.append(Observation(robot_id=robot_id, kind=ObservationKind.DETECTION, label=label, measurement=z))
                logger.debug("Object detected", robot_id=robot_id, label=label, time=round(truth.time, 3))
        if not found:
            found.append(Observation(robot_id=robot_id, kind=ObservationKind.MISS))
        observations[robot_id] = found
    return observations


def uniform_prior(arena: Arena, per_axis: int = 3) -> GaussianMixture:
    """Tiled broad Gaussians covering the arena with equal mass."""
    xs = np.linspace(arena.xmin, arena.xmax, 2 * per_axis + 1)[1::2]
    ys = np.linspace(arena.ymin, arena.ymax, 2 * per_axis + 1)[1::2]
    sx = (arena.xmax - arena.xmin) / per_axis / 2.0
    sy = (arena.ymax - arena.ymin) / per_axis / 2.0
    means = np.array([[x, y] for y in ys for x in xs])
    cov = np.diag([sx**2, sy**2])
    mass = 1.0 / len(means)
    weights = np.full(len(means), mass / np.sqrt(np.linalg.det(2.0 * np.pi * cov)))
    return GaussianMixture.from_arrays(weights, means, np.repeat(cov[None], len(means), axis=0), normalized=True)
