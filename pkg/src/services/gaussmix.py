"""
Gaussian / Gaussian-mixture algebra

Densities, products, exact negative-measurement posteriors, sample-based
re-approximation (weighted K-means + moment matching) and greedy
moment-preserving reduction of untracked-object beliefs.
"""
from typing import Optional, Tuple, Union

import numpy as np
from sklearn.cluster import KMeans

from src.models.arrays import clamp_psd
from src.models.gaussian import Gaussian, GaussianMixture, SignedMixture
from src.utils.config import get_settings
from src.utils.exceptions import InvalidArgumentError, InvalidBeliefError, NumericalError
from src.utils.logger import get_logger
from src.utils.rng import SeedLike, as_generator

logger = get_logger(__name__)

AnyMixture = Union[GaussianMixture, SignedMixture]

EM_TOL = 1e-4


# ==================== Evaluation ====================

def _inverse(covs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.inv(covs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular covariance: {exc}") from exc


def exponent_terms(points: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """exp(-0.5 * Mahalanobis^2) for every (point, component) pair, shape (P, C)."""
    precisions = _inverse(covs)
    diff = points[:, None, :] - means[None, :, :]
    maha = np.einsum("pci,cij,pcj->pc", diff, precisions, diff)
    return np.exp(-0.5 * maha)


def evaluate(mix: AnyMixture, points: np.ndarray) -> np.ndarray:
    """Un-normalized mixture value at each row of `points`."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if len(mix) == 0:
        return np.zeros(points.shape[0])
    if points.shape[1] != mix.dim:
        raise InvalidArgumentError(f"point dimension {points.shape[1]} != mixture dimension {mix.dim}")
    return exponent_terms(points, mix.means, mix.covs) @ mix.weights


def density_at(mix: AnyMixture, point) -> float:
    """sum_l gamma_l exp(-0.5 (p - mu_l)' Sigma_l^-1 (p - mu_l))"""
    point = np.atleast_1d(np.asarray(point, dtype=float))
    if point.ndim != 1:
        raise InvalidArgumentError("point must be a vector")
    if len(mix) and point.shape[0] != mix.dim:
        raise InvalidArgumentError(f"point dimension {point.shape[0]} != mixture dimension {mix.dim}")
    value = float(evaluate(mix, point[None, :])[0])
    if isinstance(mix, GaussianMixture):
        return max(value, 0.0)
    return value


def normal_pdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Normalized Gaussian density N(x; mean, cov)."""
    diff = np.atleast_1d(x - mean)
    cov = np.atleast_2d(cov)
    sign, logdet = np.linalg.slogdet(2.0 * np.pi * cov)
    if sign <= 0:
        raise NumericalError("covariance is singular")
    maha = float(diff @ np.linalg.solve(cov, diff))
    return float(np.exp(-0.5 * (maha + logdet)))


# ==================== Products ====================

def gaussian_product(a: Gaussian, b: Gaussian) -> Tuple[float, Gaussian]:
    """N(x; ma, Sa) N(x; mb, Sb) = scale * N(x; mc, Sc), scale = N(ma; mb, Sa + Sb)."""
    if a.dim != b.dim:
        raise InvalidArgumentError(f"dimension mismatch {a.dim} vs {b.dim}")
    total = a.cov + b.cov
    sign, _ = np.linalg.slogdet(total)
    if sign <= 0 or np.linalg.cond(total) > 1e14:
        raise NumericalError("sum of covariances is singular")
    scale = normal_pdf(a.mean, b.mean, total)
    gain_a = np.linalg.solve(total, a.cov).T  # Sa (Sa+Sb)^-1
    cov = a.cov - gain_a @ a.cov
    mean = a.mean + gain_a @ (b.mean - a.mean)
    return scale, Gaussian(mean=mean, cov=clamp_psd(cov, 0.0))


def _pairwise_products(
    means_a: np.ndarray, covs_a: np.ndarray, means_b: np.ndarray, covs_b: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched gaussian_product over all (a, b) pairs, flattened a-major."""
    dim = means_a.shape[1]
    total = covs_a[:, None] + covs_b[None, :]
    precision = _inverse(total)
    diff = means_a[:, None, :] - means_b[None, :, :]
    maha = np.einsum("abi,abij,abj->ab", diff, precision, diff)
    sign, logdet = np.linalg.slogdet(2.0 * np.pi * total)
    if np.any(sign <= 0):
        raise NumericalError("sum of covariances is singular")
    scale = np.exp(-0.5 * (maha + logdet))
    gain = np.einsum("aij,abjk->abik", covs_a, precision)
    cov = covs_a[:, None] - np.einsum("abij,ajk->abik", gain, covs_a)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    mean = means_a[:, None, :] + np.einsum("abij,abj->abi", gain, -diff)
    return scale.reshape(-1), mean.reshape(-1, dim), cov.reshape(-1, dim, dim)


# ==================== Negative information ====================

def negative_update(prior: GaussianMixture, miss_kernel: GaussianMixture) -> SignedMixture:
    """Exact un-normalized posterior prior(a) * (1 - kernel(a)) as a signed mixture."""
    if len(miss_kernel) == 0 or len(prior) == 0:
        return SignedMixture.from_mixture(prior)
    if prior.dim != miss_kernel.dim:
        raise InvalidArgumentError(f"prior dimension {prior.dim} != kernel dimension {miss_kernel.dim}")

    scale, means, covs = _pairwise_products(prior.means, prior.covs, miss_kernel.means, miss_kernel.covs)
    # gamma c_a * kappa c_b * scale expressed as an un-normalized weight of the product
    density_mass = np.outer(prior.integrals, miss_kernel.integrals).reshape(-1) * scale
    product_norm = np.sqrt(np.linalg.det(2.0 * np.pi * covs))
    product_weights = -density_mass / product_norm

    weights = np.concatenate([prior.weights, product_weights])
    all_means = np.concatenate([prior.means, means])
    all_covs = np.concatenate([prior.covs, covs])
    return SignedMixture.from_arrays(weights, all_means, all_covs)


# ==================== Sampling ====================

def _sqrt_factors(covs: np.ndarray) -> np.ndarray:
    eigvals, eigvecs = np.linalg.eigh(covs)
    return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))[:, None, :]


def _draw(probs: np.ndarray, means: np.ndarray, covs: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    index = rng.choice(len(probs), size=n, p=probs)
    noise = rng.standard_normal((n, means.shape[1]))
    factors = _sqrt_factors(covs)
    return means[index] + np.einsum("nij,nj->ni", factors[index], noise)


def sample(mix: GaussianMixture, n: int, rng_seed: SeedLike = None) -> np.ndarray:
    """i.i.d. draws from the normalized mixture density, shape (n, dim)."""
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    probs = mix.probability_weights()
    rng = as_generator(rng_seed)
    return _draw(probs / probs.sum(), mix.means, mix.covs, n, rng)


# ==================== Re-approximation ====================

def _cluster_moments(
    points: np.ndarray,
    weights: np.ndarray,
    labels: np.ndarray,
    k: int,
    bandwidth: np.ndarray,
    floor: float,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    dim = points.shape[1]
    masses, means, covs = [], [], []
    for c in range(k):
        member = labels == c
        w = weights[member]
        mass = w.sum()
        if not mass > 0.0:
            continue
        x = points[member]
        mean = w @ x / mass
        diff = x - mean
        cov = (w[:, None] * diff).T @ diff / mass
        # small clusters borrow the sample bandwidth so they do not collapse to spikes
        n_eff = mass ** 2 / float(w @ w)
        shrink = (dim + 1.0) / (n_eff + dim + 1.0)
        cov = (1.0 - shrink) * cov + shrink * bandwidth
        masses.append(mass)
        means.append(mean)
        covs.append(clamp_psd(cov, floor))
    return np.array(masses), np.array(means), np.array(covs)


def _weighted_em(
    points: np.ndarray,
    weights: np.ndarray,
    masses: np.ndarray,
    means: np.ndarray,
    covs: np.ndarray,
    iterations: int,
    floor: float,
    tol: float = EM_TOL,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Weighted EM polish; stops early once no mean moves more than `tol`."""
    dim = points.shape[1]
    total = weights.sum()
    pis = masses / masses.sum()
    for _ in range(iterations):
        precision = np.linalg.inv(covs)
        diff = points[:, None, :] - means[None]
        maha = np.einsum("pci,cij,pcj->pc", diff, precision, diff)
        _, logdet = np.linalg.slogdet(2.0 * np.pi * covs)
        log_r = np.log(np.maximum(pis, 1e-300))[None] - 0.5 * (maha + logdet[None])
        log_r -= log_r.max(axis=1, keepdims=True)
        resp = np.exp(log_r)
        resp /= resp.sum(axis=1, keepdims=True)
        rw = resp * weights[:, None]
        nk = rw.sum(axis=0)
        alive = nk > 1e-12 * total
        if not np.all(alive):
            rw, nk, means, covs = rw[:, alive], nk[alive], means[alive], covs[alive]
        pis = nk / nk.sum()
        previous = means
        means = (rw.T @ points) / nk[:, None]
        diff = points[:, None, :] - means[None]
        covs = np.einsum("pc,pci,pcj->cij", rw, diff, diff) / nk[:, None, None]
        covs = covs + floor * np.eye(dim)[None]
        if np.abs(means - previous).max() < tol:
            break
    return pis, means, covs


def refit_mixture(
    signed: AnyMixture,
    max_components: int,
    sample_budget: int,
    rng_seed: SeedLike = None,
    em_iterations: Optional[int] = None,
) -> GaussianMixture:
    """Re-approximate a signed mixture by a positive one with at most `max_components` terms."""
    if sample_budget < 1:
        raise InvalidArgumentError("sample_budget must be >= 1")
    if max_components < 1:
        raise InvalidArgumentError("max_components must be >= 1")
    settings = get_settings()
    if em_iterations is None:
        em_iterations = settings.refit_em_iterations

    if len(signed) == 0:
        raise InvalidBeliefError("cannot refit an empty mixture")
    if bool(np.all(signed.weights > 0.0)) and len(signed) <= max_components:
        return GaussianMixture.from_arrays(signed.weights, signed.means, signed.covs)

    total = signed.total_integral()
    if not total > 0.0:
        raise InvalidBeliefError(f"signed mixture has non-positive integral {total:.3e}")

    integrals = signed.integrals
    keep = np.abs(integrals) > settings.prune_weight * total
    weights, means, covs = signed.weights[keep], signed.means[keep], signed.covs[keep]
    pruned = SignedMixture.from_arrays(weights, means, covs)
    if bool(np.all(weights > 0.0)) and len(weights) <= max_components:
        scale = total / pruned.total_integral()
        return GaussianMixture.from_arrays(weights * scale, means, covs)

    rng = as_generator(rng_seed)
    positive = weights > 0.0
    pos_mass = integrals[keep][positive]
    proposal_probs = pos_mass / pos_mass.sum()
    points = _draw(proposal_probs, means[positive], covs[positive], sample_budget, rng)

    proposal = GaussianMixture.from_arrays(weights[positive], means[positive], covs[positive])
    q = evaluate(proposal, points) / proposal.total_integral()
    f = np.clip(evaluate(pruned, points), 0.0, None)
    importance = np.where(q > 0.0, f / np.maximum(q, 1e-300), 0.0)
    support = importance > 0.0
    if not np.any(support):
        raise InvalidBeliefError("clamped signed density has no support at the samples")
    points, importance = points[support], importance[support]

    dim = points.shape[1]
    n = points.shape[0]
    k = int(min(max_components, n))
    global_mean = importance @ points / importance.sum()
    centered = points - global_mean
    global_cov = (importance[:, None] * centered).T @ centered / importance.sum()
    bandwidth = (4.0 / (dim + 2.0)) ** (2.0 / (dim + 4.0)) * n ** (-2.0 / (dim + 4.0)) * global_cov

    if k == 1:
        labels = np.zeros(n, dtype=int)
    else:
        seed = int(rng.integers(0, 2**31 - 1))
        kmeans = KMeans(n_clusters=k, n_init=1, random_state=seed)
        labels = kmeans.fit_predict(points, sample_weight=importance)

    masses, c_means, c_covs = _cluster_moments(points, importance, labels, k, bandwidth, settings.cov_floor)
    if em_iterations > 0 and len(masses) > 1:
        masses, c_means, c_covs = _weighted_em(
            points, importance, masses, c_means, c_covs, em_iterations, settings.cov_floor
        )
        c_covs = np.array([clamp_psd(c, settings.cov_floor) for c in c_covs])

    fractions = masses / masses.sum()
    c_weights = total * fractions / np.sqrt(np.linalg.det(2.0 * np.pi * c_covs))
    logger.debug("Mixture refit", components_in=len(signed), components_out=len(c_weights), samples=n)
    return GaussianMixture.from_arrays(c_weights, c_means, c_covs)


def _merge_pair(w1, w2, m1, m2, c1, c2):
    w = w1 + w2
    a, b = w1 / w, w2 / w
    m = a * m1 + b * m2
    d = (m1 - m2)[:, None]
    c = a * c1 + b * c2 + a * b * (d @ d.T)
    return w, m, c


def _merge_cost(w1, w2, m1, m2, c1, c2) -> float:
    """Runnalls upper bound on the KL discrimination caused by merging two components."""
    w, _, c = _merge_pair(w1, w2, m1, m2, c1, c2)
    ld = np.linalg.slogdet(c)[1]
    return 0.5 * (w * ld - w1 * np.linalg.slogdet(c1)[1] - w2 * np.linalg.slogdet(c2)[1])


def reduce_mixture(mix: GaussianMixture, max_components: int) -> GaussianMixture:
    """Greedy moment-preserving pair merging down to `max_components` (deterministic)."""
    if max_components < 1:
        raise InvalidArgumentError("max_components must be >= 1")
    if len(mix) <= max_components:
        return mix
    masses = list(mix.integrals)
    means = list(mix.means)
    covs = list(mix.covs)
    while len(masses) > max_components:
        best, pair = np.inf, (0, 1)
        for i in range(len(masses)):
            for j in range(i + 1, len(masses)):
                cost = _merge_cost(masses[i], masses[j], means[i], means[j], covs[i], covs[j])
                if cost < best:
                    best, pair = cost, (i, j)
        i, j = pair
        w, m, c = _merge_pair(masses[i], masses[j], means[i], means[j], covs[i], covs[j])
        for index in (j, i):
            del masses[index], means[index], covs[index]
        masses.append(w)
        means.append(m)
        covs.append(c)
    covs_arr = np.array(covs)
    weights = np.array(masses) / np.sqrt(np.linalg.det(2.0 * np.pi * covs_arr))
    return GaussianMixture.from_arrays(weights, np.array(means), covs_arr)


# ==================== Belief maintenance ====================

def diffuse(mix: GaussianMixture, rate: float, dt: float) -> GaussianMixture:
    """Add rate*dt*I to every component covariance, keeping component integrals."""
    if len(mix) == 0 or rate <= 0.0 or dt <= 0.0:
        return mix
    covs = mix.covs + rate * dt * np.eye(mix.dim)[None]
    weights = mix.integrals / np.sqrt(np.linalg.det(2.0 * np.pi * covs))
    return GaussianMixture.from_arrays(weights, mix.means, covs)


def mixture_moments(mix: GaussianMixture) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the normalized mixture density."""
    probs = mix.probability_weights()
    mean = probs @ mix.means
    diff = mix.means - mean
    cov = np.einsum("c,cij->ij", probs, mix.covs) + (probs[:, None] * diff).T @ diff
    return mean, cov


def density_grid(
    mix: GaussianMixture,
    bounds: Tuple[float, float, float, float],
    resolution: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalized density on a cell-centred grid; grid[row=y, col=x]."""
    xmin, xmax, ymin, ymax = bounds
    xs = xmin + (np.arange(resolution) + 0.5) * (xmax - xmin) / resolution
    ys = ymin + (np.arange(resolution) + 0.5) * (ymax - ymin) / resolution
    gx, gy = np.meshgrid(xs, ys)
    points = np.column_stack([gx.ravel(), gy.ravel()])
    total = mix.total_integral() if len(mix) else 0.0
    values = evaluate(mix, points) / total if total > 0.0 else np.zeros(points.shape[0])
    return xs, ys, values.reshape(resolution, resolution)
