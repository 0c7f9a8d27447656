"""
Detection-probability computations

Closed-form kernels of the Gaussian-mixture detector against Gaussian and
Gaussian-mixture object beliefs, the range-detector approximation and the
Bernoulli detection draw used by the simulator.
"""
from typing import Optional, Tuple

import numpy as np
from scipy.optimize import minimize

from src.models.gaussian import Gaussian, GaussianMixture
from src.models.sensor import SensorMixand, SensorModel
from src.utils.exceptions import InvalidArgumentError, NumericalError
from src.utils.logger import get_logger
from src.utils.rng import SeedLike, as_generator

logger = get_logger(__name__)


def _as_vector(value, dim: Optional[int] = None) -> np.ndarray:
    vector = np.atleast_1d(np.asarray(value, dtype=float))
    if dim is not None and vector.shape[-1] != dim:
        raise InvalidArgumentError(f"expected dimension {dim}, got {vector.shape[-1]}")
    return vector


def _as_cov(value, dim: int) -> np.ndarray:
    if value is None:
        return np.zeros((dim, dim))
    cov = np.atleast_2d(np.asarray(value, dtype=float))
    if cov.shape != (dim, dim):
        raise InvalidArgumentError(f"expected {dim}x{dim} covariance, got {cov.shape}")
    return cov


# ==================== Closed-form terms ====================

def _log_terms(
    sensor: SensorModel,
    robot_mean: np.ndarray,
    robot_cov: np.ndarray,
    means: np.ndarray,
    covs: np.ndarray,
) -> np.ndarray:
    """log of zeta_l (|S_O|/|S|)^(1/2) exp(-0.5 delta' S^-1 delta), shape (components, mixands)."""
    total = sensor.covs[None] + robot_cov[None, None] + covs[:, None]
    sign, logdet = np.linalg.slogdet(total)
    if np.any(sign <= 0):
        raise NumericalError("total detection covariance is singular")
    try:
        precision = np.linalg.inv(total)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"total detection covariance is singular: {exc}") from exc
    _, logdet_o = np.linalg.slogdet(sensor.covs)
    delta = robot_mean[None, None] - sensor.offsets[None] - means[:, None]
    maha = np.einsum("jli,jlik,jlk->jl", delta, precision, delta)
    return np.log(sensor.zetas)[None] + 0.5 * (logdet_o[None] - logdet) - 0.5 * maha


def mixand_terms(sensor: SensorModel, robot_mean, robot_cov, obj: Gaussian) -> np.ndarray:
    """Per-mixand detection terms f_l (unclamped); their sum is the detection probability."""
    dim = sensor.dim
    robot_mean = _as_vector(robot_mean, dim)
    robot_cov = _as_cov(robot_cov, dim)
    if obj.dim != dim:
        raise InvalidArgumentError(f"object dimension {obj.dim} != sensor dimension {dim}")
    return np.exp(_log_terms(sensor, robot_mean, robot_cov, obj.mean[None], obj.cov[None])[0])


def detect_prob_gaussian(sensor: SensorModel, robot_mean, robot_cov, obj: Gaussian) -> float:
    """Detection probability of a Gaussian object belief from a Gaussian robot belief."""
    value = float(mixand_terms(sensor, robot_mean, robot_cov, obj).sum())
    return min(max(value, 0.0), 1.0)


def detect_prob_mixture(sensor: SensorModel, robot_mean, robot_cov, obj: GaussianMixture) -> float:
    """Linear extension of detect_prob_gaussian to a (renormalized) mixture belief."""
    dim = sensor.dim
    robot_mean = _as_vector(robot_mean, dim)
    robot_cov = _as_cov(robot_cov, dim)
    probs = obj.probability_weights()
    if obj.dim != dim:
        raise InvalidArgumentError(f"belief dimension {obj.dim} != sensor dimension {dim}")
    terms = np.exp(_log_terms(sensor, robot_mean, robot_cov, obj.means, obj.covs))
    value = float(probs @ terms.sum(axis=1))
    return min(max(value, 0.0), 1.0)


def jensen_log_bound(sensor: SensorModel, robot_mean, robot_cov, obj: Gaussian) -> float:
    """sum_l lambda_l ln(f_l / lambda_l) with lambda_l = zeta_l / sum(zeta); a lower bound on ln P."""
    dim = sensor.dim
    robot_mean = _as_vector(robot_mean, dim)
    robot_cov = _as_cov(robot_cov, dim)
    log_f = _log_terms(sensor, robot_mean, robot_cov, obj.mean[None], obj.cov[None])[0]
    lam = sensor.zetas / sensor.zetas.sum()
    return float(lam @ (log_f - np.log(lam)))


def miss_kernel_in_object_space(sensor: SensorModel, robot_mean, robot_cov) -> GaussianMixture:
    """Detection probability as a function of object position, marginalized over the robot belief."""
    dim = sensor.dim
    robot_mean = _as_vector(robot_mean, dim)
    robot_cov = _as_cov(robot_cov, dim)
    covs = sensor.covs + robot_cov[None]
    ratio = np.linalg.det(sensor.covs) / np.linalg.det(covs)
    weights = sensor.zetas * np.sqrt(ratio)
    means = robot_mean[None] - sensor.offsets
    return GaussianMixture.from_arrays(weights, means, covs)


def kernel_value(sensor: SensorModel, robot_position, object_position) -> np.ndarray:
    """Pointwise detector value for true positions (broadcasts over leading axes), clamped to [0, 1]."""
    robot = np.asarray(robot_position, dtype=float)
    obj = np.asarray(object_position, dtype=float)
    d = np.broadcast_to(obj - robot, np.broadcast_shapes(robot.shape, obj.shape))
    if d.shape[-1] != sensor.dim:
        raise InvalidArgumentError(f"expected dimension {sensor.dim}, got {d.shape[-1]}")
    flat = d.reshape(-1, sensor.dim)
    diff = flat[:, None, :] + sensor.offsets[None]
    maha = np.einsum("pci,cij,pcj->pc", diff, sensor.precisions, diff)
    values = np.clip(np.exp(-0.5 * maha) @ sensor.zetas, 0.0, 1.0)
    result = values.reshape(d.shape[:-1])
    return float(result) if result.ndim == 0 else result


def sample_detection(sensor: SensorModel, robot_true, object_true, rng_seed: SeedLike = None) -> bool:
    """Bernoulli draw at the detector value of the true relative position."""
    rng = as_generator(rng_seed)
    p = float(kernel_value(sensor, robot_true, object_true))
    return bool(rng.random() < p)


# ==================== Range detector ====================

def disc_l1_error(sensor: SensorModel, radius: float, resolution: int = 81) -> float:
    """Grid L1 distance between the kernel and the disc indicator, as a fraction of disc area."""
    extent = 2.0 * radius
    axis = np.linspace(-extent, extent, resolution)
    cell = (axis[1] - axis[0]) ** 2
    gx, gy = np.meshgrid(axis, axis)
    d = np.column_stack([gx.ravel(), gy.ravel()])
    values = kernel_value(sensor, np.zeros(2), d)
    disc = (np.hypot(d[:, 0], d[:, 1]) <= radius).astype(float)
    return float(np.abs(values - disc).sum() * cell / (np.pi * radius**2))


def _ring_mixands(params: np.ndarray, radius: float, n_ring: int):
    log_sc, log_zc, ring, log_sr, log_st, log_zr = params
    mixands = [(np.exp(log_zc), np.zeros(2), np.exp(2.0 * log_sc) * np.eye(2))]
    rho = radius * ring
    for k in range(n_ring):
        angle = 2.0 * np.pi * k / n_ring
        u = np.array([np.cos(angle), np.sin(angle)])
        t = np.array([-u[1], u[0]])
        cov = np.exp(2.0 * log_sr) * np.outer(u, u) + np.exp(2.0 * log_st) * np.outer(t, t)
        mixands.append((np.exp(log_zr), -rho * u, cov))
    return mixands


def _grid_error(params: np.ndarray, radius: float, n_ring: int, d: np.ndarray, disc: np.ndarray, cell: float) -> float:
    mixands = _ring_mixands(params, radius, n_ring)
    values = np.zeros(d.shape[0])
    for zeta, c, cov in mixands:
        diff = d + c
        maha = np.einsum("pi,ij,pj->p", diff, np.linalg.inv(cov), diff)
        values += zeta * np.exp(-0.5 * maha)
    peak = values.max()
    if not peak > 0.0:
        return np.inf
    return float(np.abs(values / peak - disc).sum() * cell)


def range_detector_approx(radius: float, n_ring: int = 0) -> SensorModel:
    """Gaussian-mixture approximation of the perfect range detector (indicator of a disc)."""
    if not radius > 0.0:
        raise InvalidArgumentError("radius must be > 0")
    if n_ring < 0:
        raise InvalidArgumentError("n_ring must be >= 0")

    sigma = radius / np.sqrt(2.0 * np.log(2.0))
    single = SensorModel.isotropic(sigma=sigma)
    if n_ring == 0:
        return single

    axis = np.linspace(-2.0 * radius, 2.0 * radius, 61)
    cell = (axis[1] - axis[0]) ** 2
    gx, gy = np.meshgrid(axis, axis)
    d = np.column_stack([gx.ravel(), gy.ravel()])
    disc = (np.hypot(d[:, 0], d[:, 1]) <= radius).astype(float)

    spacing = 2.0 * np.pi * 0.65 * radius / n_ring
    x0 = np.log([0.5 * radius, 1.0, 1.0, 0.3 * radius, 0.5 * spacing, 1.0])
    x0[2] = 0.65
    result = minimize(
        _grid_error,
        x0,
        args=(radius, n_ring, d, disc, cell),
        method="Nelder-Mead",
        options={"maxiter": 2000, "xatol": 1e-5, "fatol": 1e-8},
    )
    fitted = SensorModel.normalized(
        [SensorMixand(zeta=z, c=c, cov=cov) for z, c, cov in _ring_mixands(result.x, radius, n_ring)]
    )

    fitted_error = disc_l1_error(fitted, radius)
    single_error = disc_l1_error(single, radius)
    logger.info("Range detector fitted", radius=radius, n_ring=n_ring,
                l1_fraction=round(fitted_error, 4), single_l1_fraction=round(single_error, 4))
    if fitted_error >= single_error:
        return single
    return fitted


# ==================== Vectorized field ====================

class DetectionField:
    """
    Sum of Gaussian bumps over robot position x and time tau:
        value(x, tau) = sum_c coef_c exp(-0.5 (x - m_c - v_c tau)' P_c (x - m_c - v_c tau))
    Built from a sensor, a robot covariance and object beliefs.
    """

    def __init__(self, coefs: np.ndarray, centers: np.ndarray, precisions: np.ndarray,
                 velocities: Optional[np.ndarray] = None, dim: Optional[int] = None):
        self.coefs = np.asarray(coefs, dtype=float).reshape(-1)
        centers = np.asarray(centers, dtype=float)
        if dim is None:
            dim = centers.shape[-1] if centers.ndim >= 2 else centers.size // max(len(self.coefs), 1)
        self.centers = centers.reshape(len(self.coefs), dim)
        self.precisions = np.asarray(precisions, dtype=float).reshape(len(self.coefs), dim, dim)
        if velocities is None:
            velocities = np.zeros_like(self.centers)
        self.velocities = np.asarray(velocities, dtype=float).reshape(self.centers.shape)

    @classmethod
    def empty(cls, dim: int = 2) -> "DetectionField":
        return cls(np.zeros(0), np.zeros((0, dim)), np.zeros((0, dim, dim)), dim=dim)

    @classmethod
    def _from_components(cls, sensor, robot_cov, probs, means, covs, velocities=None, weight=1.0):
        dim = sensor.dim
        robot_cov = _as_cov(robot_cov, dim)
        total = sensor.covs[None] + robot_cov[None, None] + covs[:, None]
        ratio = np.linalg.det(sensor.covs)[None] / np.linalg.det(total)
        coefs = weight * probs[:, None] * sensor.zetas[None] * np.sqrt(ratio)
        centers = means[:, None] + sensor.offsets[None]
        if velocities is not None:
            velocities = np.broadcast_to(velocities[:, None], centers.shape)
        return cls(
            coefs.reshape(-1),
            centers.reshape(-1, dim),
            np.linalg.inv(total).reshape(-1, dim, dim),
            None if velocities is None else velocities.reshape(-1, dim),
        )

    @classmethod
    def for_mixture(cls, sensor: SensorModel, robot_cov, belief: GaussianMixture) -> "DetectionField":
        if len(belief) == 0 or not belief.total_integral() > 0.0:
            return cls.empty(sensor.dim)
        return cls._from_components(sensor, robot_cov, belief.probability_weights(), belief.means, belief.covs)

    @classmethod
    def for_gaussian(cls, sensor: SensorModel, robot_cov, obj: Gaussian,
                     velocity=None, weight: float = 1.0) -> "DetectionField":
        velocities = None if velocity is None else np.asarray(velocity, dtype=float)[None]
        return cls._from_components(
            sensor, robot_cov, np.ones(1), obj.mean[None], obj.cov[None], velocities, weight
        )

    def __add__(self, other: "DetectionField") -> "DetectionField":
        return DetectionField(
            np.concatenate([self.coefs, other.coefs]),
            np.concatenate([self.centers, other.centers]),
            np.concatenate([self.precisions, other.precisions]),
            np.concatenate([self.velocities, other.velocities]),
            dim=self.centers.shape[1],
        )

    def __len__(self) -> int:
        return len(self.coefs)

    def _terms(self, points: np.ndarray, times) -> Tuple[np.ndarray, np.ndarray]:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if times is None:
            times = np.zeros(points.shape[0])
        times = np.broadcast_to(np.asarray(times, dtype=float), (points.shape[0],))
        centers = self.centers[None] + times[:, None, None] * self.velocities[None]
        diff = points[:, None, :] - centers
        pd = np.einsum("cij,pcj->pci", self.precisions, diff)
        bumps = self.coefs[None] * np.exp(-0.5 * np.einsum("pci,pci->pc", diff, pd))
        return bumps, pd

    def value(self, points, times=None) -> np.ndarray:
        if len(self) == 0:
            return np.zeros(np.atleast_2d(points).shape[0])
        bumps, _ = self._terms(points, times)
        return bumps.sum(axis=1)

    def value_and_gradient(self, points, times=None) -> Tuple[np.ndarray, np.ndarray]:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if len(self) == 0:
            return np.zeros(points.shape[0]), np.zeros_like(points)
        bumps, pd = self._terms(points, times)
        return bumps.sum(axis=1), -np.einsum("pc,pci->pi", bumps, pd)
