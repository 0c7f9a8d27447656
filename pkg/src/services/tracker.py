"""
Kalman tracking of discovered objects and the intermittent-measurement covariance study
"""
from typing import Iterable, Optional

import numpy as np

from src.models.arrays import symmetrize
from src.models.tracking import CovarianceStudyReport, KalmanTrack, LtiModel
from src.utils.exceptions import DivergenceError, InvalidArgumentError, NumericalError
from src.utils.logger import get_logger
from src.utils.rng import SeedLike, as_generator

logger = get_logger(__name__)

DEFAULT_THRESHOLDS = (0.05, 0.1, 0.2, 0.27, 0.5, 1.0)
RICCATI_TOL = 1e-9
RICCATI_MAX_ITER = 100_000


# ==================== Filtering ====================

def predict(track: KalmanTrack, horizon_steps: int = 1) -> KalmanTrack:
    if horizon_steps < 0:
        raise InvalidArgumentError("horizon_steps must be >= 0")
    if horizon_steps == 0:
        return track
    Fk, Qk = track.model.transition(horizon_steps)
    return track.model_copy(update={
        "mean": Fk @ track.mean,
        "cov": symmetrize(Fk @ track.cov @ Fk.T + Qk),
    })


def _joseph_update(cov: np.ndarray, H: np.ndarray, R: np.ndarray):
    S = H @ cov @ H.T + R
    if np.linalg.cond(S) > 1e14:
        raise NumericalError("innovation covariance is singular")
    K = np.linalg.solve(S, H @ cov).T
    A = np.eye(cov.shape[0]) - K @ H
    return K, symmetrize(A @ cov @ A.T + K @ R @ K.T)


def update(track: KalmanTrack, measurement, time: Optional[float] = None) -> KalmanTrack:
    """Kalman measurement update (Joseph-form covariance)."""
    z = np.atleast_1d(np.asarray(measurement, dtype=float))
    if z.shape != (track.model.n_z,) or not np.all(np.isfinite(z)):
        raise InvalidArgumentError(f"measurement must be a finite {track.model.n_z}-vector")
    K, cov = _joseph_update(track.cov, track.model.H, track.model.R)
    mean = track.mean + K @ (z - track.model.H @ track.mean)
    return track.model_copy(update={
        "mean": mean,
        "cov": cov,
        "last_update": track.last_update if time is None else float(time),
    })


def spawn_track(track_id: int, position, model: LtiModel, v_max: float, time: float = 0.0) -> KalmanTrack:
    """New track at a first detection: velocity unknown up to v_max."""
    position = np.atleast_1d(np.asarray(position, dtype=float))
    n_z = model.n_z
    mean = np.zeros(model.n_a)
    mean[:n_z] = position
    cov = np.zeros((model.n_a, model.n_a))
    cov[:n_z, :n_z] = model.R
    if model.n_a > n_z:
        cov[n_z:, n_z:] = v_max**2 * np.eye(model.n_a - n_z)
    logger.info("Track spawned", track_id=track_id, position=position.round(3).tolist(), time=time)
    return KalmanTrack(id=track_id, mean=mean, cov=cov, model=model, last_update=time)


def position_cov(track: KalmanTrack) -> np.ndarray:
    H = track.model.H
    return H @ track.cov @ H.T


def covariance_norm(cov: np.ndarray, H: Optional[np.ndarray] = None) -> float:
    """Spectral norm of the positional covariance block H P H'."""
    block = cov if H is None else H @ cov @ H.T
    return float(np.linalg.norm(block, 2))


# ==================== Riccati ====================

def riccati_fixed_point(model: LtiModel) -> np.ndarray:
    """Fixed point of the filtered-covariance recursion P <- update(F P F' + Q)."""
    P = model.Q.copy()
    for iteration in range(RICCATI_MAX_ITER):
        _, nxt = _joseph_update(model.F @ P @ model.F.T + model.Q, model.H, model.R)
        if np.abs(nxt - P).max() < RICCATI_TOL:
            logger.debug("Riccati converged", iterations=iteration + 1)
            return nxt
        P = nxt
    raise DivergenceError(f"Riccati recursion did not converge in {RICCATI_MAX_ITER} iterations")


# ==================== Covariance study ====================

def _batched_update(covs: np.ndarray, H: np.ndarray, R: np.ndarray) -> np.ndarray:
    S = np.einsum("ij,tjk,lk->til", H, covs, H) + R[None]
    HP = np.einsum("ij,tjk->tik", H, covs)
    K = np.swapaxes(np.linalg.solve(S, HP), 1, 2)
    A = np.eye(covs.shape[1])[None] - np.einsum("tij,jk->tik", K, H)
    out = np.einsum("tij,tjk,tlk->til", A, covs, A) + np.einsum("tij,jk,tlk->til", K, R, K)
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def intermittent_covariance_study(
    model: LtiModel,
    detect_prob: float,
    horizons: int,
    trials: int,
    steps_per_horizon: int,
    rng_seed: SeedLike = None,
    initial_cov: Optional[np.ndarray] = None,
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
    pmf_bins: int = 20,
) -> CovarianceStudyReport:
    """
    Positional covariance norms after `horizons` horizons with at most one
    measurement per horizon, detected with probability `detect_prob`.

    Draws are common random numbers u[trial, horizon] (detect iff u < p), so
    studies at different probabilities with one seed are coupled.
    """
    if not 0.0 < detect_prob <= 1.0:
        raise InvalidArgumentError("detect_prob must be in (0, 1]")
    if trials < 1 or horizons < 0 or steps_per_horizon < 1:
        raise InvalidArgumentError("trials and steps_per_horizon must be >= 1, horizons >= 0")

    coarse = model.lifted(steps_per_horizon)
    if initial_cov is None:
        initial_cov = riccati_fixed_point(coarse)
    rng = as_generator(rng_seed)
    draws = rng.random((trials, horizons))

    covs = np.broadcast_to(np.asarray(initial_cov, dtype=float), (trials, model.n_a, model.n_a)).copy()
    for h in range(horizons):
        covs = np.einsum("ij,tjk,lk->til", coarse.F, covs, coarse.F) + coarse.Q[None]
        detected = draws[:, h] < detect_prob
        if np.any(detected):
            covs[detected] = _batched_update(covs[detected], coarse.H, coarse.R)

    blocks = np.einsum("ij,tjk,lk->til", model.H, covs, model.H)
    norms = np.linalg.norm(blocks, ord=2, axis=(1, 2))

    kept = np.sort(norms)[: max(1, int(np.floor(0.95 * trials)))]
    counts, edges = np.histogram(kept, bins=pmf_bins)
    fractions = counts / kept.size
    report = CovarianceStudyReport(
        detect_prob=detect_prob,
        horizons=horizons,
        trials=trials,
        steps_per_horizon=steps_per_horizon,
        seed=rng_seed if isinstance(rng_seed, int) else None,
        norms=norms.tolist(),
        mean_norm=float(norms.mean()),
        pmf_peak_fraction=float(fractions.max()),
        pmf_edges=edges.tolist(),
        pmf_fractions=fractions.tolist(),
        cdf_at={float(t): float(np.mean(norms <= t)) for t in thresholds},
    )
    logger.info("Covariance study complete", detect_prob=detect_prob, trials=trials,
                mean_norm=round(report.mean_norm, 5), peak_fraction=round(report.pmf_peak_fraction, 3))
    return report
