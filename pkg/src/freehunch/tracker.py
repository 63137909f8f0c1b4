"""Denoiser-covariance tracking across noise levels and sample locations.

Two updates are combined along a sampling trajectory:

* the time update carries ``(mean, cov)`` from one noise level to another at a
  fixed point, using a local Gaussian model of ``p(x_t)``;
* the space update applies a BFGS rank-two correction from two denoiser means
  at the same noise level, using that ``sigma^2 * E[x0|x_t]`` has Jacobian
  ``Cov[x0|x_t]``.

Dense kernels broadcast over leading batch axes so a whole population of
trajectories can be tracked at once (:class:`BatchTrackerState`); the
single-trajectory :class:`TrackerState` also supports the diagonal plus
low-rank backend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Union

import numpy as np
from scipy.sparse.linalg import LinearOperator, minres

from .dct import DctPlan
from .matrix_core import (
    CapacityError,
    CovarianceBackend,
    DenseSymMatrix,
    LowRankDiagMatrix,
    MatrixCoreError,
    add_scalar_diagonal,
    append_rank_one,
    apply,
    invert,
    recompress,
    to_dense,
)
from .moments import DenoiserMoments


class TimeUpdateDomainError(ArithmeticError):
    """The transported covariance would not be positive definite."""


class InsufficientDataError(ValueError):
    pass


class SpaceOutcome(str, Enum):
    NONE = "none"
    ACCEPTED = "accepted"
    SKIPPED_CURVATURE = "skipped-curvature"
    SKIPPED_RANGE = "skipped-range"


def precision_shift(sigma: float, sigma_next: float) -> float:
    """``sigma_next^-2 - sigma^-2``; an infinite level contributes zero."""
    inv = 0.0 if math.isinf(sigma) else sigma**-2
    return sigma_next**-2 - inv


# ---------------------------------------------------------------- dense kernels


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def dense_time_update_cov(cov: np.ndarray, sigma: float, sigma_next: float) -> np.ndarray:
    """``(cov^-1 + c I)^-1`` computed as ``solve(I + c cov, cov)``."""
    c = precision_shift(sigma, sigma_next)
    if c == 0:
        return cov
    n = cov.shape[-1]
    return _sym(np.linalg.solve(np.eye(n) + c * cov, cov))


def dense_transfer_mean(cov, mean, x, sigma: float, sigma_next: float) -> np.ndarray:
    """Denoiser mean at ``sigma_next`` for the same point ``x``, from moments at ``sigma``."""
    n = cov.shape[-1]
    d_var = sigma_next**2 - sigma**2
    lhs = sigma_next**2 * np.eye(n) - (d_var / sigma**2) * cov
    rhs = np.asarray(mean) - np.asarray(x)
    return x + sigma_next**2 * np.linalg.solve(lhs, rhs[..., None])[..., 0]


def dense_bfgs_update(cov, dx, de, curvature_tolerance: float = 1e-8):
    """BFGS update of ``cov`` from displacement ``dx`` and mean difference ``de``.

    Returns ``(new_cov, accepted)``; rows failing the curvature test keep ``cov``.
    """
    cov = np.asarray(cov)
    dx = np.asarray(dx, dtype=float)
    de = np.asarray(de, dtype=float)
    s_dx = np.einsum("...ij,...j->...i", cov, dx)
    xsx = np.sum(dx * s_dx, axis=-1)
    ex = np.sum(de * dx, axis=-1)
    scale = np.linalg.norm(de, axis=-1) * np.linalg.norm(dx, axis=-1)
    accepted = (ex > curvature_tolerance * scale) & (xsx > 0) & (scale > 0)
    safe_xsx = np.where(accepted, xsx, 1.0)
    safe_ex = np.where(accepted, ex, 1.0)
    update = (
        -s_dx[..., :, None] * s_dx[..., None, :] / safe_xsx[..., None, None]
        + de[..., :, None] * de[..., None, :] / safe_ex[..., None, None]
    )
    new = np.where(accepted[..., None, None], cov + update, cov)
    return _sym(new), accepted


def dense_bfgs_inverse_update(precision, dx, de) -> np.ndarray:
    """Inverse-covariance form of the BFGS update (dense, single pair)."""
    dx = np.asarray(dx, dtype=float)
    de = np.asarray(de, dtype=float)
    gamma = 1.0 / (de @ dx)
    n = dx.shape[0]
    left = np.eye(n) - gamma * np.outer(dx, de)
    right = np.eye(n) - gamma * np.outer(de, dx)
    return _sym(left @ precision @ right + gamma * np.outer(dx, dx))


# -------------------------------------------------------------- initialization


@dataclass(frozen=True)
class Identity:
    scale: float = 1.0


@dataclass(frozen=True)
class DataCovariance:
    samples: np.ndarray


@dataclass(frozen=True)
class DctDiagonal:
    samples: np.ndarray
    shape: tuple
    variance_floor: float = 0.0


InitStrategy = Union[Identity, DataCovariance, DctDiagonal]


def initialize(strategy: InitStrategy, dim: int) -> CovarianceBackend:
    """Initial covariance. For :class:`DctDiagonal` the result lives in DCT coordinates."""
    if isinstance(strategy, Identity):
        return DenseSymMatrix.identity(dim, strategy.scale)
    samples = np.atleast_2d(np.asarray(strategy.samples, dtype=float))
    if samples.shape[0] < 2:
        raise InsufficientDataError("at least two samples are required")
    if samples.shape[1] != dim:
        raise ValueError(f"samples have dimension {samples.shape[1]}, expected {dim}")
    if isinstance(strategy, DataCovariance):
        return DenseSymMatrix(np.atleast_2d(np.cov(samples, rowvar=False)))
    if isinstance(strategy, DctDiagonal):
        plan = DctPlan(strategy.shape)
        if plan.size != dim:
            raise ValueError("signal shape does not match dimension")
        coeffs = plan.forward(samples)
        var = np.var(coeffs, axis=0, ddof=1)
        return LowRankDiagMatrix.from_diagonal(np.maximum(var, strategy.variance_floor))
    raise TypeError(f"unknown init strategy {strategy!r}")


def dense_initial_covariance(strategy: InitStrategy, dim: int) -> np.ndarray:
    """Initial covariance as a dense matrix in data coordinates."""
    dense = to_dense(initialize(strategy, dim)).entries
    if isinstance(strategy, DctDiagonal):
        g = DctPlan(strategy.shape).basis()
        dense = g @ dense @ g.T
    return dense


# ----------------------------------------------------- backend-generic updates


def time_update_covariance(cov: CovarianceBackend, sigma: float, sigma_next: float) -> CovarianceBackend:
    c = precision_shift(sigma, sigma_next)
    if c == 0:
        return cov
    if isinstance(cov, DenseSymMatrix):
        new = dense_time_update_cov(cov.entries, sigma, sigma_next)
        evals = np.linalg.eigvalsh(new)
        if evals[0] <= 0 or not np.all(np.isfinite(evals)):
            raise TimeUpdateDomainError(
                f"time update {sigma:g} -> {sigma_next:g} lost definiteness (min eigenvalue {evals[0]:.3e})"
            )
        return DenseSymMatrix(new)
    try:
        return invert(add_scalar_diagonal(invert(cov), c))
    except MatrixCoreError as exc:
        raise TimeUpdateDomainError(f"time update {sigma:g} -> {sigma_next:g} failed: {exc}") from exc


def transfer_mean(cov: CovarianceBackend, mean, x, sigma: float, sigma_next: float) -> np.ndarray:
    if isinstance(cov, DenseSymMatrix):
        return dense_transfer_mean(cov.entries, mean, x, sigma, sigma_next)
    # (s'^2 I - k Sigma) z = r; symmetric but indefinite when extrapolating upwards
    n = cov.dim
    k = (sigma_next**2 - sigma**2) / sigma**2
    op = LinearOperator((n, n), matvec=lambda v: sigma_next**2 * v - k * apply(cov, v), dtype=float)
    r = np.asarray(mean) - np.asarray(x)
    z, info = minres(op, r, rtol=1e-12, maxiter=10 * n)
    if info != 0:
        raise TimeUpdateDomainError("mean transfer solve did not converge")
    return x + sigma_next**2 * z


def time_update(m: DenoiserMoments, sigma_next: float) -> DenoiserMoments:
    """Transport denoiser moments to ``sigma_next`` at the same location."""
    if not sigma_next > 0:
        raise ValueError("sigma_next must be positive")
    if m.location is None:
        raise ValueError("moments need a location for the mean update")
    x = m.location
    if m.basis is not None:
        mean_c = transfer_mean(
            m.covariance, m.basis.forward(m.mean), m.basis.forward(x), m.sigma, sigma_next
        )
        mean = m.basis.inverse(mean_c)
    else:
        mean = transfer_mean(m.covariance, m.mean, x, m.sigma, sigma_next)
    cov = time_update_covariance(m.covariance, m.sigma, sigma_next)
    return DenoiserMoments(mean, cov, float(sigma_next), x, m.basis)


def bfgs_update(cov: CovarianceBackend, dx, de, curvature_tolerance: float = 1e-8):
    """Returns ``(new_cov, accepted)``."""
    dx = np.asarray(dx, dtype=float)
    de = np.asarray(de, dtype=float)
    if isinstance(cov, DenseSymMatrix):
        new, ok = dense_bfgs_update(cov.entries, dx, de, curvature_tolerance)
        return (DenseSymMatrix(new) if ok else cov), bool(ok)
    s_dx = apply(cov, dx)
    xsx = float(dx @ s_dx)
    ex = float(de @ dx)
    if not (ex > curvature_tolerance * np.linalg.norm(de) * np.linalg.norm(dx) and xsx > 0):
        return cov, False
    if max(cov.ranks) + 1 > cov.rank_cap:
        cov = recompress(cov, cov.rank_cap - 1)
    try:
        new = append_rank_one(cov, de / math.sqrt(ex), s_dx / math.sqrt(xsx))
    except CapacityError:
        new = append_rank_one(recompress(cov, cov.rank_cap - 1), de / math.sqrt(ex), s_dx / math.sqrt(xsx))
    return new, True


# -------------------------------------------------------------- tracker state


@dataclass(frozen=True)
class TrackerState:
    """Per-trajectory tracker. ``covariance`` is valid at ``(prev_location, sigma)``.

    Before the first denoiser call it holds the initialization, valid at
    ``sigma`` (``inf`` means the data covariance itself).
    """

    covariance: CovarianceBackend
    sigma: float = math.inf
    basis: Optional[DctPlan] = None
    prev_mean: Optional[np.ndarray] = None
    prev_location: Optional[np.ndarray] = None
    prev_sigma: Optional[float] = None
    space_update_range: tuple = (1.0, 5.0)
    curvature_tolerance: float = 1e-8
    space_updates: bool = True
    last_outcome: SpaceOutcome = SpaceOutcome.NONE

    @property
    def moments(self) -> Optional[DenoiserMoments]:
        if self.prev_mean is None:
            return None
        return DenoiserMoments(self.prev_mean, self.covariance, self.prev_sigma, self.prev_location, self.basis)

    def _to_work(self, v):
        return v if self.basis is None else self.basis.forward(v)

    def in_range(self, sigma: float) -> bool:
        lo, hi = self.space_update_range
        return lo <= sigma <= hi


def new_tracker(strategy: InitStrategy, dim: int, init_sigma: float = math.inf, **options) -> TrackerState:
    basis = DctPlan(strategy.shape) if isinstance(strategy, DctDiagonal) else None
    return TrackerState(initialize(strategy, dim), init_sigma, basis, **options)


def space_update(state: TrackerState, x_new, mu_new, sigma: float, mu_transferred) -> TrackerState:
    """BFGS refinement from ``(prev_location, mu_transferred)`` to ``(x_new, mu_new)`` at ``sigma``."""
    if state.prev_location is None:
        raise ValueError("space update needs a previous location")
    if not state.space_updates or not state.in_range(sigma):
        return replace(state, last_outcome=SpaceOutcome.SKIPPED_RANGE)
    dx = state._to_work(np.asarray(x_new) - state.prev_location)
    de = sigma**2 * state._to_work(np.asarray(mu_new) - np.asarray(mu_transferred))
    if not np.any(dx):
        return replace(state, last_outcome=SpaceOutcome.SKIPPED_CURVATURE)
    cov, ok = bfgs_update(state.covariance, dx, de, state.curvature_tolerance)
    outcome = SpaceOutcome.ACCEPTED if ok else SpaceOutcome.SKIPPED_CURVATURE
    return replace(state, covariance=cov, last_outcome=outcome)


def process_denoiser(state: TrackerState, mu_new, x_new, sigma_new: float, transferred_mean=None):
    """Fold one denoiser evaluation into the tracker.

    ``transferred_mean`` overrides the time-updated previous mean with an exact
    denoiser mean at ``(prev_location, sigma_new)`` when one is available.
    Returns ``(new_state, moments at (x_new, sigma_new))``.
    """
    mu_new = np.asarray(mu_new, dtype=float)
    x_new = np.asarray(x_new, dtype=float)
    if state.prev_mean is None:
        cov = time_update_covariance(state.covariance, state.sigma, sigma_new)
        state = replace(state, covariance=cov, last_outcome=SpaceOutcome.NONE)
    else:
        if transferred_mean is None:
            moved = transfer_mean(
                state.covariance,
                state._to_work(state.prev_mean),
                state._to_work(state.prev_location),
                state.prev_sigma,
                sigma_new,
            )
            transferred_mean = moved if state.basis is None else state.basis.inverse(moved)
        cov = time_update_covariance(state.covariance, state.prev_sigma, sigma_new)
        state = space_update(replace(state, covariance=cov), x_new, mu_new, sigma_new, transferred_mean)
    state = replace(state, sigma=float(sigma_new), prev_mean=mu_new, prev_location=x_new, prev_sigma=float(sigma_new))
    return state, state.moments


# ------------------------------------------------------------ batched tracker


@dataclass(frozen=True)
class BatchTrackerState:
    """Dense tracker for a population of trajectories sharing one noise level per call."""

    covariance: np.ndarray
    sigma: float = math.inf
    prev_mean: Optional[np.ndarray] = None
    prev_location: Optional[np.ndarray] = None
    prev_sigma: Optional[float] = None
    space_update_range: tuple = (1.0, 5.0)
    curvature_tolerance: float = 1e-8
    space_updates: bool = True
    accepted: Optional[np.ndarray] = field(default=None, compare=False)

    @classmethod
    def from_covariance(cls, cov: np.ndarray, batch: int, **options) -> "BatchTrackerState":
        cov = np.broadcast_to(np.asarray(cov, dtype=float), (batch,) + np.shape(cov)[-2:]).copy()
        return cls(cov, **options)


def process_denoiser_batch(state: BatchTrackerState, mu_new, x_new, sigma_new: float, transferred_mean=None):
    """Batched counterpart of :func:`process_denoiser`; returns ``(state, covariances)``."""
    mu_new = np.asarray(mu_new, dtype=float)
    x_new = np.asarray(x_new, dtype=float)
    accepted = np.zeros(mu_new.shape[:-1], dtype=bool)
    if state.prev_mean is None:
        cov = dense_time_update_cov(state.covariance, state.sigma, sigma_new)
    else:
        if transferred_mean is None:
            transferred_mean = dense_transfer_mean(
                state.covariance, state.prev_mean, state.prev_location, state.prev_sigma, sigma_new
            )
        cov = dense_time_update_cov(state.covariance, state.prev_sigma, sigma_new)
        lo, hi = state.space_update_range
        if state.space_updates and lo <= sigma_new <= hi:
            dx = x_new - state.prev_location
            de = sigma_new**2 * (mu_new - transferred_mean)
            cov, accepted = dense_bfgs_update(cov, dx, de, state.curvature_tolerance)
    new = replace(
        state,
        covariance=cov,
        sigma=float(sigma_new),
        prev_mean=mu_new,
        prev_location=x_new,
        prev_sigma=float(sigma_new),
        accepted=accepted,
    )
    return new, cov
