"""
Next-Best-View layer

Robot-to-track assignment, convex tracking-feasibility sets and terminal
viewpoint placement maximizing detection of untracked objects under the
tracking and separation constraints.
"""
from itertools import combinations
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from src.models.gaussian import Gaussian, GaussianMixture
from src.models.jet import JetParams
from src.models.planning import (
    AgentState,
    AssignmentResult,
    CoarseModel,
    FeasibilityEllipsoid,
    NbvSolution,
    Viewpoint,
)
from src.models.sensor import SensorModel
from src.models.tracking import KalmanTrack
from src.services import tracker
from src.services.sensor import DetectionField, detect_prob_gaussian, jensen_log_bound
from src.utils.exceptions import CapacityError, InfeasibleAssignmentError, InvalidArgumentError
from src.utils.logger import get_logger
from src.utils.rng import SeedLike, as_generator

logger = get_logger(__name__)

UNREACHABLE_COST = 1e9
SEPARATION_TOL = 1e-9

TrackLike = Union[KalmanTrack, Gaussian]


def _position_belief(track: TrackLike) -> Gaussian:
    return track.position_belief() if isinstance(track, KalmanTrack) else track


def default_separation(sensor: SensorModel) -> float:
    """Non-overlapping 2-sigma footprints."""
    return 2.0 * sensor.one_sigma_radius() * 2.0


def reach_radius(robot: AgentState, time_to_go: float) -> float:
    return CoarseModel.for_unicycle(robot.v_max, time_to_go).reach_radius


# ==================== Assignment ====================

def solve_assignment(
    robots: Sequence[AgentState],
    tracks: Sequence[KalmanTrack],
    horizon: float,
    dt: Optional[float] = None,
) -> AssignmentResult:
    """Minimum-distance matching of tracks to robots that can reach them within the horizon."""
    n, r = len(robots), len(tracks)
    if r > n:
        raise CapacityError(f"{r} tracked objects exceed {n} robots")
    if r == 0:
        return AssignmentResult(pairs={}, unassigned_robots=[rb.id for rb in robots], cost=0.0)

    predicted = []
    for track in tracks:
        step = dt if dt is not None else track.model.dt
        steps = int(round(horizon / step))
        predicted.append(tracker.predict(track, steps).position())
    predicted = np.array(predicted)
    positions = np.array([rb.position for rb in robots])
    radii = np.array([reach_radius(rb, horizon) for rb in robots])

    distances = np.linalg.norm(positions[:, None, :] - predicted[None, :, :], axis=2)
    reachable = distances <= radii[:, None]
    orphans = [tracks[j].id for j in range(r) if not reachable[:, j].any()]
    if orphans:
        raise InfeasibleAssignmentError(f"tracks {orphans} are reachable by no robot", orphans)

    cost = np.where(reachable, distances, UNREACHABLE_COST)
    cost = np.hstack([cost, np.zeros((n, n - r))])  # dummy columns absorb explorers
    rows, cols = linear_sum_assignment(cost)

    pairs: Dict[int, int] = {}
    unassigned: List[int] = []
    stuck: List[int] = []
    total = 0.0
    for row, col in zip(rows, cols):
        if col >= r:
            unassigned.append(robots[row].id)
            continue
        if not reachable[row, col]:
            stuck.append(tracks[col].id)
            continue
        pairs[tracks[col].id] = robots[row].id
        total += distances[row, col]
    if stuck:
        raise InfeasibleAssignmentError(f"no matching reaches tracks {stuck}", stuck)

    logger.debug("Assignment solved", pairs=pairs, cost=round(total, 4))
    return AssignmentResult(pairs=pairs, unassigned_robots=sorted(unassigned), cost=total)


# ==================== Feasibility sets ====================

def quadratic_radius_sq(alpha: float, total_cov: np.ndarray, density_weight: float) -> float:
    """-2 ln((1 - alpha) |2 pi S|^(1/2) / w) for a kernel term of density weight w."""
    _, logdet = np.linalg.slogdet(2.0 * np.pi * total_cov)
    return float(-2.0 * (np.log(1.0 - alpha) + 0.5 * logdet - np.log(density_weight)))


def feasibility_ellipsoid(
    sensor: SensorModel,
    robot_cov_T,
    track_predicted: TrackLike,
    alpha: float,
) -> FeasibilityEllipsoid:
    """Exact convex set of terminal robot means meeting the detection chance constraint."""
    if sensor.n_s != 1:
        raise InvalidArgumentError("feasibility_ellipsoid needs a single-mixand sensor")
    if not 0.0 < alpha < 1.0:
        raise InvalidArgumentError("alpha must be in (0, 1)")
    obj = _position_belief(track_predicted)
    mixand = sensor.mixands[0]
    shape = mixand.cov + np.asarray(robot_cov_T, dtype=float) + obj.cov
    weight = mixand.zeta * np.sqrt(np.linalg.det(2.0 * np.pi * mixand.cov))
    radius_sq = quadratic_radius_sq(alpha, shape, weight)
    return FeasibilityEllipsoid(
        track_id=track_predicted.id if isinstance(track_predicted, KalmanTrack) else None,
        center=obj.mean + mixand.c,
        shape=shape,
        radius_sq=radius_sq,
        feasible=radius_sq > 0.0,
    )


def jensen_ellipsoid(
    sensor: SensorModel,
    robot_cov_T,
    track_predicted: TrackLike,
    alpha: float,
) -> FeasibilityEllipsoid:
    """
    Set where the log-sum lower bound meets ln(1 - alpha). The bound is a
    lambda-weighted sum of quadratics, so the set is again an ellipsoid; it
    coincides with feasibility_ellipsoid for a single mixand.
    """
    obj = _position_belief(track_predicted)
    robot_cov_T = np.asarray(robot_cov_T, dtype=float)
    lam = sensor.zetas / sensor.zetas.sum()
    totals = sensor.covs + robot_cov_T[None] + obj.cov[None]
    precisions = np.linalg.inv(totals)
    centers = obj.mean[None] + sensor.offsets

    precision = np.einsum("l,lij->ij", lam, precisions)
    shape = np.linalg.inv(precision)
    center = shape @ np.einsum("l,lij,lj->i", lam, precisions, centers)
    residual = float(np.einsum("l,li,lij,lj->", lam, centers, precisions, centers) - center @ precision @ center)

    _, logdet_o = np.linalg.slogdet(sensor.covs)
    _, logdet_s = np.linalg.slogdet(totals)
    constant = float(lam @ (np.log(sensor.zetas) + 0.5 * (logdet_o - logdet_s) - np.log(lam)))
    radius_sq = 2.0 * (constant - np.log(1.0 - alpha)) - residual
    return FeasibilityEllipsoid(
        track_id=track_predicted.id if isinstance(track_predicted, KalmanTrack) else None,
        center=center,
        shape=0.5 * (shape + shape.T),
        radius_sq=radius_sq,
        feasible=radius_sq > 0.0,
    )


def jensen_inner_bound(
    sensor: SensorModel,
    robot_cov_T,
    track_predicted: TrackLike,
    alpha: float,
    candidate_x,
) -> bool:
    """True only if the chance constraint provably holds at candidate_x."""
    bound = jensen_log_bound(sensor, candidate_x, robot_cov_T, _position_belief(track_predicted))
    return bool(bound >= np.log(1.0 - alpha))


# ==================== Projections ====================

def _disc_projection(center: np.ndarray, radius: float) -> Callable[[np.ndarray], np.ndarray]:
    def project(x: np.ndarray) -> np.ndarray:
        offset = x - center
        dist = np.linalg.norm(offset)
        if dist <= radius:
            return x
        return center + offset * (radius / dist)
    return project


def _dykstra(first: Callable, second: Callable, iterations: int = 100) -> Callable[[np.ndarray], np.ndarray]:
    """Projection onto the intersection of two convex sets; `second` is applied last."""
    def project(x: np.ndarray) -> np.ndarray:
        y = x.copy()
        p = np.zeros_like(x)
        q = np.zeros_like(x)
        for _ in range(iterations):
            z = first(y + p)
            p = y + p - z
            nxt = second(z + q)
            q = z + q - nxt
            if np.linalg.norm(nxt - y) < 1e-12:
                return nxt
            y = nxt
        return y
    return project


# ==================== Ascent ====================

def _ascend(
    field: DetectionField,
    start: np.ndarray,
    project: Callable[[np.ndarray], np.ndarray],
    step: float = 0.5,
    iterations: int = 200,
) -> np.ndarray:
    """Projected normalized-gradient ascent with adaptive step length."""
    x = project(np.asarray(start, dtype=float))
    value = float(field.value(x)[0])
    for _ in range(iterations):
        _, grad = field.value_and_gradient(x)
        grad = grad[0]
        norm = np.linalg.norm(grad)
        if norm < 1e-14 or step < 1e-6:
            break
        trial = project(x + step * grad / norm)
        trial_value = float(field.value(trial)[0])
        if trial_value > value:
            x, value = trial, trial_value
            step *= 1.5
        else:
            step *= 0.5
    return x


def _multistart(field: DetectionField, starts: List[np.ndarray], project: Callable) -> np.ndarray:
    best, best_value = None, -np.inf
    for start in starts:
        x = _ascend(field, start, project)
        value = float(field.value(x)[0])
        if value > best_value:
            best, best_value = x, value
    return best


def _random_in_disc(center: np.ndarray, radius: float, count: int, rng: np.random.Generator) -> List[np.ndarray]:
    r = radius * np.sqrt(rng.random(count))
    phi = 2.0 * np.pi * rng.random(count)
    return [center + np.array([ri * np.cos(p), ri * np.sin(p)]) for ri, p in zip(r, phi)]


def _push_apart(x: np.ndarray, anchors: List[np.ndarray], separation: float, project: Callable) -> np.ndarray:
    """Move x out of every anchor's separation ball, staying inside the reach disc."""
    target = separation * (1.0 + SEPARATION_TOL)
    for _ in range(50):
        moved = False
        for anchor in anchors:
            offset = x - anchor
            dist = np.linalg.norm(offset)
            if dist < separation:
                direction = offset / dist if dist > 1e-12 else np.array([1.0, 0.0])
                x = project(anchor + target * direction)
                moved = True
        if not moved:
            break
    return x


def _separated(x: np.ndarray, anchors: List[np.ndarray], separation: float) -> bool:
    return all(np.linalg.norm(x - a) >= separation * (1.0 - SEPARATION_TOL) for a in anchors)


def _best_separated_point(field, center, radius, anchors, separation, resolution: int = 41):
    """Fallback lattice search for a separated point in the reach disc."""
    axis = np.linspace(-radius, radius, resolution)
    gx, gy = np.meshgrid(axis, axis)
    points = center + np.column_stack([gx.ravel(), gy.ravel()])
    points = points[np.linalg.norm(points - center, axis=1) <= radius]
    if anchors:
        dists = np.linalg.norm(points[:, None, :] - np.array(anchors)[None], axis=2)
        points = points[np.all(dists >= separation, axis=1)]
    if len(points) == 0:
        return None
    return points[int(np.argmax(field.value(points)))]


def _joint_refine(fields, points, projections, separation, iterations: int = 100) -> List[np.ndarray]:
    """Joint projected-gradient ascent over all explorers keeping pairwise separation."""
    points = [p.copy() for p in points]

    def objective(pts):
        return float(sum(f.value(p)[0] for f, p in zip(fields, pts)))

    def feasible(pts):
        return all(np.linalg.norm(a - b) >= separation * (1.0 - SEPARATION_TOL) for a, b in combinations(pts, 2))

    value = objective(points)
    step = 0.25
    for _ in range(iterations):
        grads = [f.value_and_gradient(p)[1][0] for f, p in zip(fields, points)]
        scale = max(np.linalg.norm(g) for g in grads)
        if scale < 1e-14 or step < 1e-6:
            break
        trial = [proj(p + step * g / scale) for p, g, proj in zip(points, grads, projections)]
        for _ in range(20):
            clash = False
            for i, j in combinations(range(len(trial)), 2):
                offset = trial[i] - trial[j]
                dist = np.linalg.norm(offset)
                if dist < separation:
                    direction = offset / dist if dist > 1e-12 else np.array([1.0, 0.0])
                    push = 0.5 * (separation * (1.0 + SEPARATION_TOL) - dist) * direction
                    trial[i] = projections[i](trial[i] + push)
                    trial[j] = projections[j](trial[j] - push)
                    clash = True
            if not clash:
                break
        trial_value = objective(trial)
        if feasible(trial) and trial_value > value:
            points, value = trial, trial_value
            step *= 1.5
        else:
            step *= 0.5
    return points


# ==================== NBV ====================

def solve_nbv(
    belief: GaussianMixture,
    robots: Sequence[AgentState],
    tracks: Sequence[KalmanTrack],
    assignment: AssignmentResult,
    sensor: SensorModel,
    params: JetParams,
    rng_seed: SeedLike = None,
    time_to_go: Optional[float] = None,
) -> NbvSolution:
    """Terminal viewpoints for all robots at the end of the current horizon."""
    rng = as_generator(rng_seed)
    horizon = params.T if time_to_go is None else max(time_to_go, params.dt)
    steps = int(round(horizon / params.dt))
    separation = params.separation or default_separation(sensor)
    by_id = {t.id: t for t in tracks}
    robot_to_track = assignment.robot_to_track()

    has_mass = len(belief) > 0 and belief.total_integral() > 0.0
    top_means = []
    if has_mass:
        order = np.argsort(-belief.probability_weights())[:3]
        top_means = [belief.means[i] for i in order]

    fields: Dict[int, DetectionField] = {}
    discs: Dict[int, Callable] = {}
    horizon_covs: Dict[int, np.ndarray] = {}
    for robot in robots:
        coarse = CoarseModel.for_unicycle(robot.v_max, horizon)
        horizon_covs[robot.id] = robot.cov + coarse.w_cov
        fields[robot.id] = DetectionField.for_mixture(sensor, horizon_covs[robot.id], belief)
        discs[robot.id] = _disc_projection(robot.position, coarse.reach_radius)

    viewpoints: Dict[int, np.ndarray] = {}
    infeasible: List[int] = []
    terminal_prob: Dict[int, float] = {}
    jensen_ok: Dict[int, bool] = {}

    # Assigned robots: ascend inside ellipsoid intersected with the reach disc
    for robot in robots:
        track_id = robot_to_track.get(robot.id)
        if track_id is None:
            continue
        predicted = tracker.predict(by_id[track_id], steps)
        ellipsoid = jensen_ellipsoid(sensor, horizon_covs[robot.id], predicted, params.alpha)
        disc = discs[robot.id]
        if not ellipsoid.feasible:
            viewpoints[robot.id] = disc(predicted.position())
            infeasible.append(track_id)
        else:
            project = _dykstra(disc, ellipsoid.project)
            field = fields[robot.id]
            starts = [robot.position, ellipsoid.center]
            if has_mass:
                starts.append(_multistart(field, [robot.position] + top_means, disc))
            x = _multistart(field, starts, project)
            viewpoints[robot.id] = x
            if not ellipsoid.contains(x, tol=1e-7):
                infeasible.append(track_id)
        x = viewpoints[robot.id]
        target = predicted.position_belief()
        terminal_prob[robot.id] = detect_prob_gaussian(sensor, x, horizon_covs[robot.id], target)
        jensen_ok[robot.id] = jensen_inner_bound(sensor, horizon_covs[robot.id], target, params.alpha, x)

    # Explorers: solo ascent, greedy lock by gain, then joint refinement
    explorers = [rb for rb in robots if rb.id not in robot_to_track]
    solo: Dict[int, np.ndarray] = {}
    for robot in explorers:
        radius = reach_radius(robot, horizon)
        starts = [robot.position] + top_means + _random_in_disc(robot.position, radius, 4, rng)
        solo[robot.id] = _multistart(fields[robot.id], starts, discs[robot.id])

    order = sorted(explorers, key=lambda rb: -float(fields[rb.id].value(solo[rb.id])[0]))
    locked: List[np.ndarray] = []
    for robot in order:
        x = solo[robot.id]
        if not _separated(x, locked, separation):
            field, disc = fields[robot.id], discs[robot.id]

            def repaired(z, disc=disc):
                return _push_apart(disc(z), locked, separation, disc)

            x = _ascend(field, repaired(x), repaired)
            radius = reach_radius(robot, horizon)
            if not _separated(x, locked, separation) or np.linalg.norm(x - robot.position) > radius + 1e-9:
                fallback = _best_separated_point(field, robot.position, radius, locked, separation)
                if fallback is not None:
                    x = fallback
        viewpoints[robot.id] = x
        locked.append(x)

    if len(explorers) > 1:
        refined = _joint_refine(
            [fields[rb.id] for rb in explorers],
            [viewpoints[rb.id] for rb in explorers],
            [discs[rb.id] for rb in explorers],
            separation,
        )
        for rb, x in zip(explorers, refined):
            viewpoints[rb.id] = x

    def explore_value(points: Dict[int, np.ndarray]) -> float:
        return float(sum(fields[rb.id].value(points[rb.id])[0] for rb in explorers))

    stay = {rb.id: rb.position for rb in explorers}
    stay_feasible = all(
        np.linalg.norm(stay[a.id] - stay[b.id]) >= separation for a, b in combinations(explorers, 2)
    )
    if explorers and stay_feasible and explore_value(stay) > explore_value(viewpoints):
        viewpoints.update(stay)

    violations = []
    for a, b in combinations(robots, 2):
        if np.linalg.norm(viewpoints[a.id] - viewpoints[b.id]) < separation * (1.0 - SEPARATION_TOL):
            both_explore = a.id not in robot_to_track and b.id not in robot_to_track
            both_track = a.id in robot_to_track and b.id in robot_to_track
            if not both_track:
                violations.append((a.id, b.id))
                if both_explore:
                    logger.warning("Explorer separation violated", robots=(a.id, b.id))

    objective = float(sum(fields[rb.id].value(viewpoints[rb.id])[0] for rb in robots))
    result = {}
    for robot in robots:
        x = viewpoints[robot.id]
        offset = x - robot.position
        heading = float(np.arctan2(offset[1], offset[0])) if np.linalg.norm(offset) > 1e-6 else robot.pose.theta
        result[robot.id] = Viewpoint(position=x, heading=heading)

    if infeasible:
        logger.warning("Tracking constraint infeasible", track_ids=infeasible)
    logger.debug("NBV solved", objective=round(objective, 6), feasible=not infeasible)
    return NbvSolution(
        viewpoints=result,
        assignment=assignment,
        objective_value=objective,
        feasible=not infeasible,
        infeasible_track_ids=sorted(set(infeasible)),
        terminal_detect_prob=terminal_prob,
        jensen_ok=jensen_ok,
        separation_violations=violations,
    )
