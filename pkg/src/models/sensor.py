"""
Detection model types

The kernel of the relative displacement d = a - x (object minus robot) is
    k(d) = sum_l zeta_l exp(-0.5 (d + c_l)' Sigma_O_l^-1 (d + c_l))
and its maximum over d must equal 1.
"""
from functools import cached_property
from typing import List

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.models.arrays import NDArray
from src.models.gaussian import _validated_moments

PEAK_TOL = 1e-3


class SensorMixand(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    zeta: float = Field(gt=0.0)
    c: NDArray
    cov: NDArray

    @model_validator(mode="after")
    def _check(self) -> "SensorMixand":
        c, cov = _validated_moments(self.c, self.cov)
        if np.linalg.eigvalsh(cov).min() <= 0.0:
            raise ValueError("sensor covariance must be positive definite")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "cov", cov)
        return self


def _kernel_values(zetas: np.ndarray, offsets: np.ndarray, precisions: np.ndarray, d: np.ndarray) -> np.ndarray:
    diff = d[:, None, :] + offsets[None]
    maha = np.einsum("pci,cij,pcj->pc", diff, precisions, diff)
    return np.exp(-0.5 * maha) @ zetas


def kernel_peak(zetas: np.ndarray, offsets: np.ndarray, covs: np.ndarray, iterations: int = 200) -> float:
    """Largest kernel value found by mean-shift started at every mixand centre."""
    precisions = np.linalg.inv(covs)
    starts = -offsets
    best = float(_kernel_values(zetas, offsets, precisions, starts).max())
    for start in starts:
        d = start.copy()
        for _ in range(iterations):
            diff = d + offsets
            resp = zetas * np.exp(-0.5 * np.einsum("ci,cij,cj->c", diff, precisions, diff))
            if resp.sum() <= 0.0:
                break
            lhs = np.einsum("c,cij->ij", resp, precisions)
            rhs = np.einsum("c,cij,cj->i", resp, precisions, -offsets)
            nxt = np.linalg.solve(lhs, rhs)
            if np.linalg.norm(nxt - d) < 1e-12:
                d = nxt
                break
            d = nxt
        best = max(best, float(_kernel_values(zetas, offsets, precisions, d[None])[0]))
    return best


class SensorModel(BaseModel):
    """Quasi-concave Gaussian-mixture detector"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mixands: List[SensorMixand] = Field(min_length=1)

    @model_validator(mode="after")
    def _check_peak(self) -> "SensorModel":
        dims = {m.c.shape[0] for m in self.mixands}
        if len(dims) != 1:
            raise ValueError(f"sensor mixands have mixed dimensions {sorted(dims)}")
        peak = kernel_peak(self.zetas, self.offsets, self.covs)
        if abs(peak - 1.0) > PEAK_TOL:
            raise ValueError(f"sensor kernel maximum must be 1, found {peak:.6f}")
        return self

    @classmethod
    def normalized(cls, mixands: List[SensorMixand]) -> "SensorModel":
        """Rescale zeta so the kernel maximum is exactly 1."""
        zetas = np.array([m.zeta for m in mixands])
        offsets = np.stack([m.c for m in mixands])
        covs = np.stack([m.cov for m in mixands])
        peak = kernel_peak(zetas, offsets, covs)
        return cls(
            mixands=[SensorMixand(zeta=m.zeta / peak, c=m.c, cov=m.cov) for m in mixands]
        )

    @classmethod
    def isotropic(cls, sigma: float = 0.5, dim: int = 2) -> "SensorModel":
        return cls(mixands=[SensorMixand(zeta=1.0, c=np.zeros(dim), cov=sigma**2 * np.eye(dim))])

    @property
    def n_s(self) -> int:
        return len(self.mixands)

    @property
    def dim(self) -> int:
        return int(self.mixands[0].c.shape[0])

    @cached_property
    def zetas(self) -> np.ndarray:
        return np.array([m.zeta for m in self.mixands])

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.stack([m.c for m in self.mixands])

    @cached_property
    def covs(self) -> np.ndarray:
        return np.stack([m.cov for m in self.mixands])

    @cached_property
    def precisions(self) -> np.ndarray:
        return np.linalg.inv(self.covs)

    def one_sigma_radius(self) -> float:
        """Largest 1-sigma semi-axis over the mixands"""
        return float(np.sqrt(np.linalg.eigvalsh(self.covs).max()))
