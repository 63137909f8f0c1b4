"""Reconstruction guidance for linear-Gaussian observations.

With a Gaussian approximation ``N(mu, Sigma)`` of ``p(x0 | x_t)`` and
``y = A x0 + sigma_y * eps``, the likelihood gradient is

    g = J^T A^T (A Sigma A^T + sigma_y^2 I)^{-1} (y - A mu),

where ``J`` is the Jacobian of the denoiser mean. ``J`` is symmetric here
(``Cov[x0|x_t] / sigma^2``), so no transpose bookkeeping is needed.

Two code paths share the same arithmetic: a single-point path that works
through matrix-vector products (any covariance backend, any operator) and a
batched dense path used by the experiment runners.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Union

import numpy as np

from .matrix_core import DenseSymMatrix, LowRankDiagMatrix, apply, diagonal
from .moments import DenoiserMoments
from .score_oracle import LinearObservation

log = logging.getLogger(__name__)


class NumericalBreakdown(ArithmeticError):
    pass


class NotPositiveDefinite(ValueError):
    pass


# ------------------------------------------------------------------------ CG


@dataclass(frozen=True)
class CgSettings:
    rtol_max: float = 1.0
    rtol_min: float = 1e-14
    sigma_lo: float = 1.0
    sigma_hi: float = 80.0
    p: float = 0.1
    max_iterations: int = 1000

    def __post_init__(self):
        if not 0 < self.rtol_min <= self.rtol_max:
            raise ValueError("need 0 < rtol_min <= rtol_max")
        if not self.sigma_lo < self.sigma_hi:
            raise ValueError("need sigma_lo < sigma_hi")
        if not self.p > 0:
            raise ValueError("p must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


def rtol_for_sigma(settings: CgSettings, sigma: float) -> float:
    """Relative CG tolerance: tight at low noise, loose at high noise."""
    lo, hi = math.log10(settings.sigma_lo), math.log10(settings.sigma_hi)
    s = min(max(sigma, settings.sigma_lo), settings.sigma_hi)
    factor = ((math.log10(s) - lo) / (hi - lo)) ** settings.p
    top, bottom = math.log10(settings.rtol_max), math.log10(settings.rtol_min)
    return 10.0 ** (factor * (top - bottom) + bottom)


@dataclass(frozen=True)
class CgResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual_norm: float


def cg_solve(
    apply_op: Callable[[np.ndarray], np.ndarray],
    b,
    rtol: float,
    max_iterations: int = 1000,
    preconditioner: Optional[np.ndarray] = None,
) -> CgResult:
    """Preconditioned conjugate gradients for an SPD operator.

    ``preconditioner`` is the diagonal of the operator (Jacobi). Convergence is
    declared on the true residual ``||A x - b|| <= rtol * ||b||``.
    """
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise NumericalBreakdown("right-hand side is not finite")
    inv_diag = None if preconditioner is None else 1.0 / np.asarray(preconditioner, dtype=float)
    b_norm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    if b_norm == 0.0:
        return CgResult(x, True, 0, 0.0)
    target = rtol * b_norm
    r = b.copy()
    if b_norm <= target:
        return CgResult(x, True, 0, b_norm)
    z = r if inv_diag is None else inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    best, best_norm = x, b_norm
    for it in range(1, max_iterations + 1):
        ap = apply_op(p)
        pap = float(p @ ap)
        if not np.isfinite(pap):
            raise NumericalBreakdown(f"non-finite curvature at iteration {it}")
        if pap <= 0:
            raise NotPositiveDefinite(f"operator not positive definite (p^T A p = {pap:.3e})")
        alpha = rz / pap
        x = x + alpha * p
        r = r - alpha * ap
        if not np.all(np.isfinite(x)):
            raise NumericalBreakdown(f"non-finite iterate at iteration {it}")
        r_norm = float(np.linalg.norm(r))
        if r_norm <= target:
            # recursive residual drifts; confirm on the true one
            true_norm = float(np.linalg.norm(b - apply_op(x)))
            if true_norm <= target:
                return CgResult(x, True, it, true_norm)
            # restart from the true residual
            r = b - apply_op(x)
            if true_norm < best_norm:
                best, best_norm = x, true_norm
            z = r if inv_diag is None else inv_diag * r
            p = z.copy()
            rz = float(r @ z)
            continue
        if r_norm < best_norm:
            best, best_norm = x, r_norm
        z = r if inv_diag is None else inv_diag * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return CgResult(best, False, max_iterations, best_norm)


# ---------------------------------------------------------------- strategies


class Jacobian(str, Enum):
    """How the denoiser-mean Jacobian is formed."""

    EXACT = "exact"  # exact Cov[x0|x_t] / sigma^2
    COVARIANCE = "covariance"  # tracked Sigma / sigma^2
    IDENTITY = "identity"


@dataclass(frozen=True)
class DPS:
    xi: float = 1.0

    def __post_init__(self):
        if not self.xi > 0:
            raise ValueError("xi must be positive")


@dataclass(frozen=True)
class PiGDM:
    pass


@dataclass(frozen=True)
class PiGDMNoScale:
    pass


@dataclass(frozen=True)
class HeuristicSigma:
    pass


@dataclass(frozen=True)
class FreeHunch:
    pass


@dataclass(frozen=True)
class Optimal:
    pass


BaselineRule = Union[DPS, PiGDM, PiGDMNoScale, HeuristicSigma, FreeHunch, Optimal]


def isotropic_variance(rule: BaselineRule, sigma: float) -> Optional[float]:
    """``r^2`` for rules that replace the covariance by ``r^2 I``; ``None`` otherwise."""
    if isinstance(rule, DPS):
        return 0.0
    if isinstance(rule, (PiGDM, PiGDMNoScale)):
        return sigma**2 / (1.0 + sigma**2)
    if isinstance(rule, HeuristicSigma):
        return sigma**2
    return None


def clip_guidance(g, mean, x, sigma: float, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    """Adjust ``g`` so the implied guided denoiser mean stays in ``[low, high]``."""
    score = (np.asarray(mean) - np.asarray(x)) / sigma**2
    guided = np.asarray(x) + sigma**2 * (score + g)
    return (np.clip(guided, low, high) - x) / sigma**2 - score


# --------------------------------------------------------- single-point path


@dataclass(frozen=True)
class GuidanceResult:
    gradient: np.ndarray
    fell_back: bool = False
    converged: bool = True
    iterations: int = 0
    residual_norm: float = 0.0


def _system(obs: LinearObservation, moments: DenoiserMoments):
    """Matvec and Jacobi diagonal of ``A Sigma A^T + sigma_y^2 I``."""
    var_y = obs.noise_std**2
    cov_matvec = moments.cov_matvec

    def op(z):
        return obs.forward(cov_matvec(obs.adjoint(z))) + var_y * z

    if moments.basis is not None:
        return op, None
    if obs.is_identity:
        return op, diagonal(moments.covariance) + var_y
    if isinstance(obs.operator, np.ndarray):
        a = obs.operator
        return op, np.array([row @ cov_matvec(row) for row in a]) + var_y
    return op, None


def _jacobian_product(cov, v, sigma: float) -> np.ndarray:
    if isinstance(cov, (DenseSymMatrix, LowRankDiagMatrix)):
        return apply(cov, v) / sigma**2
    return np.asarray(cov) @ v / sigma**2


def _solve(op, diag, rhs, cg: Optional[CgSettings], sigma: float, solver: str, m: int):
    if solver == "direct":
        dense = np.column_stack([op(e) for e in np.eye(m)])
        dense = 0.5 * (dense + dense.T)
        try:
            chol = np.linalg.cholesky(dense)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite("guidance system is not positive definite") from exc
        z = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        return CgResult(z, True, 0, float(np.linalg.norm(op(z) - rhs)))
    cg = cg or CgSettings()
    if diag is not None and np.any(diag <= 0):
        raise NotPositiveDefinite("guidance system has a non-positive diagonal entry")
    result = cg_solve(op, rhs, rtol_for_sigma(cg, sigma), cg.max_iterations, diag)
    if not result.converged:
        log.warning("CG did not converge: residual %.3e after %d iterations", result.residual_norm, result.iterations)
    return result


def reconstruction_guidance(
    moments: DenoiserMoments,
    obs: LinearObservation,
    jac: Jacobian = Jacobian.COVARIANCE,
    cg: Optional[CgSettings] = None,
    exact_cov=None,
    fallback: bool = True,
    threshold: float = 1.0,
    solver: str = "cg",
) -> GuidanceResult:
    """Likelihood gradient at ``moments.location`` with the moments' covariance in the solve.

    ``exact_cov`` (dense matrix) is required for ``Jacobian.EXACT``. When the
    max-abs entry of ``sigma^2 g`` exceeds ``threshold`` under the exact
    Jacobian, the tracked covariance is used instead, unless that is larger still.
    """
    if solver not in ("cg", "direct"):
        raise ValueError(f"unknown solver {solver!r}")
    sigma = moments.sigma
    op, diag = _system(obs, moments)
    residual = obs.observation - obs.forward(moments.mean)
    sol = _solve(op, diag, residual, cg, sigma, solver, residual.shape[0])
    v = obs.adjoint(sol.x)

    def project(kind):
        if kind is Jacobian.IDENTITY:
            return v
        if kind is Jacobian.EXACT:
            if exact_cov is None:
                raise ValueError("exact Jacobian requested without an exact covariance")
            return _jacobian_product(exact_cov, v, sigma)
        return moments.cov_matvec(v) / sigma**2

    g = project(jac)
    fell_back = False
    if fallback and jac is Jacobian.EXACT:
        scale = np.max(np.abs(sigma**2 * g))
        if scale > threshold:
            alt = project(Jacobian.COVARIANCE)
            # replacement must not enlarge an estimate already flagged as too large
            if np.max(np.abs(sigma**2 * alt)) <= scale:
                g, fell_back = alt, True
    return GuidanceResult(g, fell_back, sol.converged, sol.iterations, sol.residual_norm)


def baseline_guidance(
    rule: BaselineRule,
    moments: DenoiserMoments,
    obs: LinearObservation,
    jac: Jacobian = Jacobian.EXACT,
    exact_cov=None,
    clip: bool = False,
    cg: Optional[CgSettings] = None,
    fallback: bool = True,
    threshold: float = 1.0,
    solver: str = "cg",
) -> GuidanceResult:
    """Guidance under one of the covariance rules.

    ``moments`` carries the denoiser mean, noise level and location; its
    covariance is used only by :class:`FreeHunch`.
    """
    sigma = moments.sigma
    x = moments.location
    if x is None:
        raise ValueError("moments need a location")
    r2 = isotropic_variance(rule, sigma)
    if isinstance(rule, Optimal):
        if exact_cov is None:
            raise ValueError("the optimal rule needs the exact covariance")
        backend = exact_cov if isinstance(exact_cov, (DenseSymMatrix, LowRankDiagMatrix)) else DenseSymMatrix(exact_cov)
        exact = DenoiserMoments(moments.mean, backend, sigma, x)
        res = reconstruction_guidance(exact, obs, Jacobian.EXACT, cg, exact_cov, False, threshold, solver)
    elif isinstance(rule, FreeHunch):
        res = reconstruction_guidance(moments, obs, jac, cg, exact_cov, fallback, threshold, solver)
    elif isinstance(rule, DPS):
        residual = obs.observation - obs.forward(moments.mean)
        norm = float(np.linalg.norm(residual))
        if norm == 0.0:
            res = GuidanceResult(np.zeros_like(moments.mean))
        else:
            v = obs.adjoint(residual) / obs.noise_std**2
            g = _apply_jacobian(jac, v, exact_cov, sigma)
            res = GuidanceResult(g * rule.xi * obs.noise_std**2 / norm)
    else:
        iso = DenoiserMoments(moments.mean, DenseSymMatrix.identity(moments.mean.shape[0], r2), sigma, x)
        res = reconstruction_guidance(iso, obs, Jacobian.IDENTITY, cg, None, False, threshold, solver)
        g = _apply_jacobian(jac, res.gradient, exact_cov, sigma)
        if isinstance(rule, PiGDM):
            g = r2 * g
        res = GuidanceResult(g, False, res.converged, res.iterations, res.residual_norm)
    if clip:
        g = clip_guidance(res.gradient, moments.mean, x, sigma)
        res = GuidanceResult(g, res.fell_back, res.converged, res.iterations, res.residual_norm)
    return res


def _apply_jacobian(jac: Jacobian, v, exact_cov, sigma: float):
    if jac is Jacobian.IDENTITY:
        return v
    if jac is Jacobian.EXACT:
        if exact_cov is None:
            raise ValueError("exact Jacobian requested without an exact covariance")
        return _jacobian_product(exact_cov, v, sigma)
    raise ValueError("isotropic rules support only the exact or identity Jacobian")


# -------------------------------------------------------------- batched path


def batched_guidance(
    rule: BaselineRule,
    mean,
    x,
    sigma: float,
    a: np.ndarray,
    y,
    noise_std: float,
    exact_cov=None,
    tracked_cov=None,
    clip: bool = False,
    fallback: bool = True,
    threshold: float = 1.0,
):
    """Dense guidance for a population ``mean, x`` of shape ``(B, N)``.

    The Jacobian is ``exact_cov / sigma^2`` when ``exact_cov`` is given and the
    identity otherwise. Returns ``(g, fell_back)`` with a per-row fallback mask.
    """
    mean = np.asarray(mean, dtype=float)
    x = np.asarray(x, dtype=float)
    b, n = mean.shape
    a = np.asarray(a, dtype=float)
    m = a.shape[0]
    residual = np.asarray(y, dtype=float) - mean @ a.T
    var_y = noise_std**2
    fell_back = np.zeros(b, dtype=bool)

    def jacobian(v, cov):
        if cov is None:
            return v
        if np.ndim(cov) == 2:
            return v @ cov.T / sigma**2
        return np.matmul(cov, v[..., None])[..., 0] / sigma**2

    def solve(cov, rhs):
        if np.ndim(cov) == 2:
            lhs = a @ cov @ a.T + var_y * np.eye(m)
            return np.linalg.solve(lhs, rhs.T).T @ a
        lhs = a @ cov @ a.T + var_y * np.eye(m)
        return np.linalg.solve(lhs, rhs[..., None])[..., 0] @ a

    r2 = isotropic_variance(rule, sigma)
    if isinstance(rule, DPS):
        norm = np.linalg.norm(residual, axis=-1)
        v = residual @ a / var_y
        g = jacobian(v, exact_cov)
        scale = np.divide(rule.xi * var_y, norm, out=np.zeros_like(norm), where=norm > 0)
        g = g * scale[:, None]
    elif r2 is not None:
        g = jacobian(solve(r2 * np.eye(n), residual), exact_cov)
        if isinstance(rule, PiGDM):
            g = r2 * g
    elif isinstance(rule, Optimal):
        g = jacobian(solve(exact_cov, residual), exact_cov)
    else:
        if tracked_cov is None:
            raise ValueError("FreeHunch guidance needs the tracked covariance")
        v = solve(tracked_cov, residual)
        if exact_cov is None:
            g = jacobian(v, tracked_cov)
        else:
            g = jacobian(v, exact_cov)
            if fallback:
                scale = np.max(np.abs(sigma**2 * g), axis=-1)
                over = scale > threshold
                if np.any(over):
                    alt = jacobian(v, tracked_cov)
                    fell_back = over & (np.max(np.abs(sigma**2 * alt), axis=-1) <= scale)
                    g = np.where(fell_back[:, None], alt, g)
    if clip:
        g = clip_guidance(g, mean, x, sigma)
    return g, fell_back
