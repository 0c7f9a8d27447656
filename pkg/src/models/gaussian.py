"""
Gaussian and Gaussian-mixture value types

Mixture weights are coefficients of the un-normalized exponential
    gamma * exp(-0.5 (p - mu)' Sigma^-1 (p - mu))
so a component integrates to gamma * |2 pi Sigma|^(1/2).
"""
from functools import cached_property
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.models.arrays import NDArray, clamp_psd
from src.utils.exceptions import InvalidBeliefError

SYMMETRY_TOL = 1e-10
EIG_TOL = 1e-12


def _validated_moments(mean: np.ndarray, cov: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if mean.ndim != 1:
        raise ValueError("mean must be a vector")
    dim = mean.shape[0]
    if cov.shape != (dim, dim):
        raise ValueError(f"cov must be {dim}x{dim}, got {cov.shape}")
    scale = max(1.0, float(np.abs(cov).max()))
    if np.abs(cov - cov.T).max() > 1e-6 * scale:
        raise ValueError("cov is not symmetric")
    cov = 0.5 * (cov + cov.T)
    if np.abs(cov - cov.T).max() > SYMMETRY_TOL:
        raise ValueError("cov is not symmetric")
    eigvals = np.linalg.eigvalsh(cov)
    if eigvals.min() < -max(EIG_TOL, 1e-9 * scale):
        raise ValueError(f"cov is not positive semidefinite (min eigenvalue {eigvals.min():.3e})")
    if eigvals.min() < 0.0:
        cov = clamp_psd(cov, 0.0)
    return mean, cov


class Gaussian(BaseModel):
    """Mean / covariance pair (normalized density N(x; mean, cov) where used as a density)"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mean: NDArray
    cov: NDArray

    @model_validator(mode="after")
    def _check(self) -> "Gaussian":
        mean, cov = _validated_moments(self.mean, self.cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        return self

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    def normalizer(self) -> float:
        """|2 pi cov|^(1/2): integral of the un-normalized exponential."""
        return float(np.sqrt(np.linalg.det(2.0 * np.pi * self.cov)))


class Mixand(BaseModel):
    """One weighted component, serialized as {w, mean, cov}"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    w: float
    mean: NDArray
    cov: NDArray

    @model_validator(mode="after")
    def _check(self) -> "Mixand":
        mean, cov = _validated_moments(self.mean, self.cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        return self

    @property
    def gaussian(self) -> Gaussian:
        return Gaussian(mean=self.mean, cov=self.cov)


class _MixtureBase(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    components: List[Mixand] = Field(default_factory=list)
    dimension: Optional[int] = Field(default=None, exclude=True)

    @model_validator(mode="after")
    def _check_dims(self):
        dims = {c.mean.shape[0] for c in self.components}
        if len(dims) > 1:
            raise ValueError(f"components have mixed dimensions {sorted(dims)}")
        if dims:
            dim = dims.pop()
            if self.dimension is not None and self.dimension != dim:
                raise ValueError("dimension does not match components")
            object.__setattr__(self, "dimension", dim)
        return self

    @property
    def dim(self) -> Optional[int]:
        return self.dimension

    def __len__(self) -> int:
        return len(self.components)

    @cached_property
    def weights(self) -> np.ndarray:
        return np.array([c.w for c in self.components], dtype=float)

    @cached_property
    def means(self) -> np.ndarray:
        if not self.components:
            return np.zeros((0, self.dimension or 0))
        return np.stack([c.mean for c in self.components])

    @cached_property
    def covs(self) -> np.ndarray:
        if not self.components:
            d = self.dimension or 0
            return np.zeros((0, d, d))
        return np.stack([c.cov for c in self.components])

    @cached_property
    def normalizers(self) -> np.ndarray:
        """|2 pi Sigma_l|^(1/2) per component"""
        if not self.components:
            return np.zeros(0)
        return np.sqrt(np.linalg.det(2.0 * np.pi * self.covs))

    @cached_property
    def integrals(self) -> np.ndarray:
        return self.weights * self.normalizers

    def total_integral(self) -> float:
        return float(self.integrals.sum())

    def component_tuples(self) -> List[Tuple[float, Gaussian]]:
        return [(c.w, c.gaussian) for c in self.components]


class GaussianMixture(_MixtureBase):
    """Positive-weight mixture: untracked-object belief or detection kernel"""

    normalized: bool = False

    @model_validator(mode="after")
    def _check_weights(self) -> "GaussianMixture":
        for c in self.components:
            if not c.w > 0.0:
                raise ValueError(f"mixture weights must be positive, got {c.w}")
        if self.normalized and self.components:
            if abs(self.total_integral() - 1.0) > 1e-6:
                raise ValueError("normalized mixture does not integrate to 1")
        return self

    @classmethod
    def from_arrays(
        cls,
        weights,
        means,
        covs,
        normalized: bool = False,
    ) -> "GaussianMixture":
        weights = np.asarray(weights, dtype=float).ravel()
        means = np.atleast_2d(np.asarray(means, dtype=float))
        covs = np.asarray(covs, dtype=float)
        if covs.ndim == 2:
            covs = covs[None]
        components = [
            Mixand(w=float(w), mean=m, cov=c) for w, m, c in zip(weights, means, covs)
        ]
        return cls(components=components, normalized=normalized, dimension=means.shape[1])

    @classmethod
    def empty(cls, dim: int) -> "GaussianMixture":
        return cls(components=[], dimension=dim)

    @classmethod
    def from_gaussian(cls, gaussian: Gaussian, weight: float = 1.0) -> "GaussianMixture":
        return cls(components=[Mixand(w=weight, mean=gaussian.mean, cov=gaussian.cov)])

    @classmethod
    def from_density(cls, gaussian: Gaussian, mass: float = 1.0) -> "GaussianMixture":
        """Component whose integral equals `mass` (mass * N(x; mean, cov))."""
        weight = mass / gaussian.normalizer()
        return cls(
            components=[Mixand(w=weight, mean=gaussian.mean, cov=gaussian.cov)],
            normalized=abs(mass - 1.0) <= 1e-12,
        )

    def probability_weights(self) -> np.ndarray:
        """Component probabilities of the density interpretation (lazy renormalization)."""
        total = self.total_integral()
        if not total > 0.0:
            raise InvalidBeliefError("mixture has zero total mass")
        return self.integrals / total

    def normalize(self) -> "GaussianMixture":
        total = self.total_integral()
        if not total > 0.0:
            raise InvalidBeliefError("cannot normalize a zero-mass mixture")
        return GaussianMixture.from_arrays(self.weights / total, self.means, self.covs, normalized=True)


class SignedMixture(_MixtureBase):
    """Mixture with possibly negative weights (exact negative-measurement posterior)"""

    @classmethod
    def from_arrays(cls, weights, means, covs) -> "SignedMixture":
        weights = np.asarray(weights, dtype=float).ravel()
        means = np.atleast_2d(np.asarray(means, dtype=float))
        covs = np.asarray(covs, dtype=float)
        if covs.ndim == 2:
            covs = covs[None]
        components = [
            Mixand(w=float(w), mean=m, cov=c) for w, m, c in zip(weights, means, covs)
        ]
        return cls(components=components, dimension=means.shape[1])

    @classmethod
    def from_mixture(cls, mix: GaussianMixture) -> "SignedMixture":
        return cls(components=list(mix.components), dimension=mix.dim)

    def is_positive(self) -> bool:
        return bool(np.all(self.weights > 0.0))
