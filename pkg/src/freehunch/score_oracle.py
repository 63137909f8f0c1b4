"""Closed-form Gaussian-mixture scores and denoiser moments under variance-exploding noise.

Smoothing a mixture by ``N(0, sigma^2 I)`` gives the mixture with component
covariances ``Sigma_i + sigma^2 I``; everything here is computed from the
component responsibilities of that smoothed mixture. Points may be batched
along leading axes; ``sigma`` is a scalar shared by the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import LinearOperator
from scipy.special import logsumexp

from .matrix_core import DenseSymMatrix
from .moments import DenoiserMoments

LOG_2PI = np.log(2.0 * np.pi)


class UnsupportedOperatorError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        cov = np.asarray(self.covariances, dtype=float)
        k, n = mu.shape
        if cov.ndim == 2:
            cov = np.broadcast_to(cov, (k, n, n)).copy()
        if w.shape != (k,) or cov.shape != (k, n, n):
            raise ValueError(
                f"inconsistent shapes: weights {w.shape}, means {mu.shape}, covariances {cov.shape}"
            )
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to one")
        if np.max(np.abs(cov - np.swapaxes(cov, 1, 2))) > 1e-12 * max(np.abs(cov).max(), 1.0):
            raise ValueError("component covariances must be symmetric")
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        if np.linalg.eigvalsh(cov)[:, 0].min() <= 0:
            raise ValueError("component covariances must be positive definite")
        for arr in (w, mu, cov):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        m = self.mean()
        centred = self.means - m
        return np.einsum("k,kij->ij", self.weights, self.covariances) + np.einsum(
            "k,ki,kj->ij", self.weights, centred, centred
        )

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        chol = np.linalg.cholesky(self.covariances)
        return self.means[labels] + np.einsum("nij,nj->ni", chol[labels], z)

    @classmethod
    def gaussian(cls, mean, cov) -> "GaussianMixture":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        return cls(np.ones(1), mean[None], cov[None])


@dataclass(frozen=True)
class LinearObservation:
    """``y = A x0 + noise_std * eps``. ``operator=None`` means the identity.

    ``noise_std = 0`` is accepted for noiseless guidance limits; the closed-form
    posterior requires it to be positive.
    """

    observation: np.ndarray
    noise_std: float
    operator: Optional[Union[np.ndarray, LinearOperator]] = None

    def __post_init__(self):
        if not self.noise_std >= 0:
            raise ValueError("noise_std must be non-negative")
        y = np.atleast_1d(np.asarray(self.observation, dtype=float))
        object.__setattr__(self, "observation", y)
        if self.operator is not None and self.operator.shape[0] != y.shape[0]:
            raise ValueError("operator rows must match the observation length")

    @property
    def is_identity(self) -> bool:
        if self.operator is None:
            return True
        if isinstance(self.operator, np.ndarray):
            a = self.operator
            return a.shape[0] == a.shape[1] and np.array_equal(a, np.eye(a.shape[0]))
        return False

    def forward(self, x) -> np.ndarray:
        """``A x`` for ``x`` of shape ``(..., N)``."""
        if self.operator is None:
            return np.asarray(x, dtype=float)
        if isinstance(self.operator, np.ndarray):
            return np.asarray(x) @ self.operator.T
        x = np.asarray(x, dtype=float)
        return self.operator.matmat(x.reshape(-1, x.shape[-1]).T).T.reshape(x.shape[:-1] + (-1,))

    def adjoint(self, r) -> np.ndarray:
        """``A^T r`` for ``r`` of shape ``(..., M)``."""
        if self.operator is None:
            return np.asarray(r, dtype=float)
        if isinstance(self.operator, np.ndarray):
            return np.asarray(r) @ self.operator
        r = np.asarray(r, dtype=float)
        return self.operator.rmatmat(r.reshape(-1, r.shape[-1]).T).T.reshape(r.shape[:-1] + (-1,))

    def matrix(self, n: int) -> np.ndarray:
        if self.operator is None:
            return np.eye(n)
        if isinstance(self.operator, np.ndarray):
            return self.operator
        return self.operator.matmat(np.eye(n))


def masking_operator(mask) -> np.ndarray:
    """Rows of the identity selected by a boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    return np.eye(mask.size)[mask]


def convolution_operator(kernel, n: int) -> LinearOperator:
    """'same'-size 1-D convolution with zero padding."""
    kernel = np.asarray(kernel, dtype=float)

    def mv(v):
        return np.convolve(np.ravel(v), kernel, mode="same")

    def rmv(v):
        # adjoint of 'same' convolution is correlation with the flipped kernel
        full = np.convolve(np.ravel(v), kernel[::-1], mode="full")
        start = (kernel.size - 1) - (kernel.size - 1) // 2
        return full[start : start + n]

    return LinearOperator((n, n), matvec=mv, rmatvec=rmv, dtype=float)


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear schedule ``sigma(t) = t``."""

    sigma_min: float = 0.002
    sigma_max: float = 20.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")

    def sigma(self, t):
        return np.asarray(t, dtype=float)

    def sigma_dot(self, t):
        return np.ones_like(np.asarray(t, dtype=float))


def _components(gmm: GaussianMixture, x: np.ndarray, sigma: float):
    """Log joint weights and ``S_i^{-1}(x - mu_i)`` per component, with ``S_i = Sigma_i + sigma^2 I``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != gmm.dim:
        raise ValueError(f"point dimension {x.shape[-1]} does not match mixture dimension {gmm.dim}")
    eye = np.eye(gmm.dim)
    logs, solved = [], []
    for w, mu, cov in zip(gmm.weights, gmm.means, gmm.covariances):
        c, low = scipy.linalg.cho_factor(cov + sigma**2 * eye, lower=True)
        diff = x - mu
        z = scipy.linalg.cho_solve((c, low), diff.reshape(-1, gmm.dim).T).T.reshape(diff.shape)
        logdet = 2.0 * np.sum(np.log(np.diag(c)))
        quad = np.sum(diff * z, axis=-1)
        logs.append(np.log(w) - 0.5 * (quad + logdet + gmm.dim * LOG_2PI))
        solved.append(z)
    return np.stack(logs, axis=-1), np.stack(solved, axis=-2)


def _responsibilities(log_joint: np.ndarray) -> np.ndarray:
    r = np.exp(log_joint - logsumexp(log_joint, axis=-1, keepdims=True))
    r[r < 1e-300] = 0.0
    return r


def gmm_log_density(gmm: GaussianMixture, x, sigma: float = 0.0) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    log_joint, _ = _components(gmm, x, sigma)
    return logsumexp(log_joint, axis=-1)


def gmm_score(gmm: GaussianMixture, x, sigma: float) -> np.ndarray:
    """Score of the sigma-smoothed mixture."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    log_joint, solved = _components(gmm, x, sigma)
    r = _responsibilities(log_joint)
    return -np.einsum("...k,...kn->...n", r, solved)


def gmm_denoiser_mean_cov(gmm: GaussianMixture, x, sigma: float):
    """Exact E[x0|x_t] and Cov[x0|x_t], batched over the leading axes of ``x``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    x = np.asarray(x, dtype=float)
    log_joint, solved = _components(gmm, x, sigma)
    r = _responsibilities(log_joint)
    n = gmm.dim
    eye = np.eye(n)
    # Component posteriors: mean x - sigma^2 S^{-1}(x - mu), cov sigma^2 S^{-1} Sigma.
    # The product form avoids the cancellation in Sigma - Sigma S^{-1} Sigma at small sigma.
    post_means = x[..., None, :] - sigma**2 * solved
    post_covs = np.stack([sigma**2 * np.linalg.solve(cov + sigma**2 * eye, cov) for cov in gmm.covariances])
    post_covs = 0.5 * (post_covs + np.swapaxes(post_covs, -1, -2))
    mean = np.einsum("...k,...kn->...n", r, post_means)
    centred = post_means - mean[..., None, :]
    within = (r @ post_covs.reshape(gmm.n_components, n * n)).reshape(r.shape[:-1] + (n, n))
    between = np.swapaxes(centred, -1, -2) @ (r[..., None] * centred)
    cov = within + between
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return mean, cov


def gmm_denoiser_moments(gmm: GaussianMixture, x, sigma: float) -> DenoiserMoments:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("gmm_denoiser_moments takes a single point; use gmm_denoiser_mean_cov for batches")
    mean, cov = gmm_denoiser_mean_cov(gmm, x, sigma)
    return DenoiserMoments(mean, DenseSymMatrix(cov), float(sigma), x.copy())


def gmm_posterior_given_y(gmm: GaussianMixture, obs: LinearObservation) -> GaussianMixture:
    """Exact p(x0 | y) for an identity observation operator."""
    if not obs.is_identity:
        raise UnsupportedOperatorError("closed-form posterior requires an identity operator")
    if not obs.noise_std > 0:
        raise ValueError("closed-form posterior requires noise_std > 0")
    y = obs.observation
    if y.shape != (gmm.dim,):
        raise ValueError("observation dimension does not match the mixture")
    noise = obs.noise_std**2 * np.eye(gmm.dim)
    log_w, means, covs = [], [], []
    for w, mu, cov in zip(gmm.weights, gmm.means, gmm.covariances):
        s = cov + noise
        c = scipy.linalg.cho_factor(s, lower=True)
        diff = y - mu
        z = scipy.linalg.cho_solve(c, diff)
        logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
        log_w.append(np.log(w) - 0.5 * (diff @ z + logdet + gmm.dim * LOG_2PI))
        means.append(mu + cov @ z)
        covs.append(cov - cov @ scipy.linalg.cho_solve(c, cov))
    log_w = np.array(log_w)
    weights = np.exp(log_w - logsumexp(log_w))
    weights[weights < 1e-300] = 0.0
    keep = weights > 0
    weights = weights[keep] / weights[keep].sum()
    covs = np.array(covs)[keep]
    return GaussianMixture(weights, np.array(means)[keep], 0.5 * (covs + np.swapaxes(covs, 1, 2)))


def gmm_conditional_score(gmm: GaussianMixture, obs: LinearObservation, x, sigma: float) -> np.ndarray:
    """Score of p(x_t | y): the score of the sigma-smoothed posterior mixture p(x0 | y)."""
    return gmm_score(gmm_posterior_given_y(gmm, obs), x, sigma)
