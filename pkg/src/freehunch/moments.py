from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dct import DctPlan
from .matrix_core import CovarianceBackend, DenseSymMatrix, apply, to_dense


@dataclass(frozen=True)
class DenoiserMoments:
    """Estimate of E[x0 | x_t] and Cov[x0 | x_t] at noise level ``sigma`` and point ``location``.

    When ``basis`` is set, ``covariance`` lives in that basis's coefficient space and
    ``mean``/``location`` are in data space.
    """

    mean: np.ndarray
    covariance: CovarianceBackend
    sigma: float
    location: Optional[np.ndarray] = None
    basis: Optional[DctPlan] = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def dim(self) -> int:
        return self.covariance.dim

    def cov_matvec(self, v) -> np.ndarray:
        """Covariance times a data-space vector."""
        if self.basis is None:
            return apply(self.covariance, v)
        return self.basis.inverse(apply(self.covariance, self.basis.forward(v)))

    def dense_covariance(self) -> np.ndarray:
        dense = to_dense(self.covariance).entries
        if self.basis is None:
            return dense
        g = self.basis.basis()
        return g @ dense @ g.T

    def as_dense(self) -> "DenoiserMoments":
        return DenoiserMoments(
            self.mean, DenseSymMatrix(self.dense_covariance()), self.sigma, self.location
        )
