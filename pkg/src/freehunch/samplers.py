"""Reverse-time integrators for the variance-exploding process with ``sigma(t) = t``.

The step functions are shape-agnostic and work on single points or batches.
:func:`sample` drives a population of trajectories through a shared time grid
with optional covariance tracking and reconstruction guidance.
:func:`free_hunch_euler` is the single-trajectory Euler loop with the tracker
updates written inline; it must agree bit-for-bit with driving
:func:`~freehunch.tracker.process_denoiser` from an external Euler loop
(:func:`tracked_euler`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Protocol

import numpy as np

from .guidance import BaselineRule, FreeHunch, Jacobian, Optimal, batched_guidance, reconstruction_guidance
from .matrix_core import DenseSymMatrix, to_dense
from .moments import DenoiserMoments
from .score_oracle import GaussianMixture, LinearObservation, gmm_denoiser_mean_cov, gmm_score
from .tracker import (
    BatchTrackerState,
    InitStrategy,
    dense_bfgs_update,
    dense_initial_covariance,
    dense_time_update_cov,
    dense_transfer_mean,
    new_tracker,
    process_denoiser,
    process_denoiser_batch,
)


class Solver(str, Enum):
    EULER = "euler"
    EULER_MARUYAMA = "euler-maruyama"
    HEUN = "heun"


@dataclass(frozen=True)
class TimeGrid:
    steps: np.ndarray
    rho: float
    sigma_min: float
    sigma_max: float

    def __post_init__(self):
        t = np.asarray(self.steps, dtype=float)
        if t.ndim != 1 or t.size < 3:
            raise ValueError("a grid needs at least two positive times and a final zero")
        if t[-1] != 0 or np.any(t[:-1] <= 0) or np.any(np.diff(t) >= 0):
            raise ValueError("grid must be strictly decreasing and end at zero")
        t.setflags(write=False)
        object.__setattr__(self, "steps", t)

    @property
    def n_steps(self) -> int:
        return self.steps.size - 1

    def intervals(self):
        return zip(self.steps[:-1], self.steps[1:])


def karras_timesteps(n_steps: int, sigma_min: float = 0.002, sigma_max: float = 80.0, rho: float = 7.0) -> TimeGrid:
    """``n_steps`` positive times warped by ``rho``, followed by a final zero."""
    if n_steps < 2:
        raise ValueError("n_steps must be at least 2")
    if not 0 < sigma_min < sigma_max:
        raise ValueError("need 0 < sigma_min < sigma_max")
    ramp = np.arange(n_steps) / (n_steps - 1)
    lo, hi = sigma_min ** (1.0 / rho), sigma_max ** (1.0 / rho)
    t = (hi + ramp * (lo - hi)) ** rho
    t[0], t[-1] = sigma_max, sigma_min
    return TimeGrid(np.append(t, 0.0), rho, sigma_min, sigma_max)


# ------------------------------------------------------------------- steps


def euler_step(x, t: float, t_next: float, total_score):
    """Probability-flow ODE step; returns ``(x_next, delta_x)``."""
    dx = -t * np.asarray(total_score) * (t_next - t)
    return x + dx, dx


def euler_maruyama_step(x, t: float, t_next: float, total_score, rng: np.random.Generator):
    """Reverse-SDE step; returns ``(x_next, delta_x)``."""
    dt = t_next - t
    noise = rng.standard_normal(np.shape(x))
    dx = -2.0 * t * np.asarray(total_score) * dt + math.sqrt(2.0 * t * abs(dt)) * noise
    return x + dx, dx


@dataclass(frozen=True)
class Evaluation:
    x: np.ndarray
    sigma: float
    score: np.ndarray


def heun_step(x, t: float, t_next: float, score_fn: Callable):
    """Second-order step; the step into ``t_next = 0`` is plain Euler.

    Returns ``(x_next, evaluations)`` with one record per score call.
    """
    s0 = score_fn(x, t)
    evals = [Evaluation(x, t, s0)]
    x_pred, _ = euler_step(x, t, t_next, s0)
    if t_next == 0:
        return x_pred, evals
    s1 = score_fn(x_pred, t_next)
    evals.append(Evaluation(x_pred, t_next, s1))
    drift = 0.5 * (t * s0 + t_next * s1)
    return x + drift * (t - t_next), evals


# ----------------------------------------------------------- score sources


class ScoreModel(Protocol):
    dim: int

    def score(self, x, sigma: float) -> np.ndarray: ...

    def denoiser(self, x, sigma: float): ...


@dataclass(frozen=True)
class OracleModel:
    """Exact unconditional score and denoiser moments of a Gaussian mixture."""

    gmm: GaussianMixture

    @property
    def dim(self) -> int:
        return self.gmm.dim

    def score(self, x, sigma: float) -> np.ndarray:
        return gmm_score(self.gmm, x, sigma)

    def denoiser(self, x, sigma: float):
        return gmm_denoiser_mean_cov(self.gmm, x, sigma)


# ---------------------------------------------------------------- configs


@dataclass(frozen=True)
class GuidanceConfig:
    obs: LinearObservation
    rule: BaselineRule = FreeHunch()
    exact_jacobian: bool = True
    clip: bool = False
    fallback: bool = True
    threshold: float = 1.0


@dataclass(frozen=True)
class TrackerConfig:
    init: InitStrategy
    init_sigma: float = math.inf
    space_update_range: tuple = (1.0, 5.0)
    curvature_tolerance: float = 1e-8
    space_updates: bool = True
    extra_evaluation: bool = False
    heun_corrector_updates: bool = True


@dataclass(frozen=True)
class SamplerConfig:
    grid: TimeGrid
    solver: Solver = Solver.EULER
    guidance: Optional[GuidanceConfig] = None
    tracker: Optional[TrackerConfig] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "solver", Solver(self.solver))
        if (
            self.guidance is not None
            and isinstance(self.guidance.rule, FreeHunch)
            and self.tracker is None
        ):
            raise ValueError("FreeHunch guidance needs a tracker configuration")


@dataclass
class StepRecord:
    index: int
    sigma: float
    guidance_scale: float
    fallback_fraction: float
    accepted_fraction: float
    aborted: int


@dataclass
class SampleResult:
    samples: np.ndarray
    aborted: np.ndarray
    steps: list = field(default_factory=list)
    covariances: list = field(default_factory=list)


# ---------------------------------------------------------- batched driver


class _Guide:
    """Score, tracker and guidance bookkeeping for one population."""

    def __init__(self, config: SamplerConfig, model, batch: int, record_covariance: bool):
        self.config = config
        self.model = model
        self.record = record_covariance
        self.covariances = []
        self.tracker = None
        tc = config.tracker
        if tc is not None:
            self.tracker = BatchTrackerState.from_covariance(
                dense_initial_covariance(tc.init, model.dim),
                batch,
                sigma=tc.init_sigma,
                space_update_range=tuple(tc.space_update_range),
                curvature_tolerance=tc.curvature_tolerance,
                space_updates=tc.space_updates,
            )
        self.last_scale = 0.0
        self.last_fallback = 0.0
        self.last_accepted = 0.0

    def needs_exact(self) -> bool:
        g = self.config.guidance
        return g is not None and (g.exact_jacobian or isinstance(g.rule, Optimal))

    def __call__(self, x, sigma: float, feed_tracker: bool = True) -> np.ndarray:
        g_cfg = self.config.guidance
        tc = self.config.tracker
        exact_cov = None
        if self.needs_exact() or (self.tracker is not None and tc.extra_evaluation):
            mean, exact_cov = self.model.denoiser(x, sigma)
            score = (mean - x) / sigma**2
        else:
            score = self.model.score(x, sigma)
            mean = x + sigma**2 * score
        tracked = None
        if self.tracker is not None:
            transferred = None
            if tc.extra_evaluation and self.tracker.prev_location is not None:
                transferred, _ = self.model.denoiser(self.tracker.prev_location, sigma)
            if feed_tracker:
                self.tracker, tracked = process_denoiser_batch(self.tracker, mean, x, sigma, transferred)
                self.last_accepted = float(np.mean(self.tracker.accepted))
            else:
                tracked = dense_time_update_cov(self.tracker.covariance, self.tracker.sigma, sigma)
            if self.record:
                self.covariances.append(tracked)
        if g_cfg is None:
            self.last_scale = 0.0
            return score
        obs = g_cfg.obs
        g, fell_back = batched_guidance(
            g_cfg.rule,
            mean,
            x,
            sigma,
            obs.matrix(self.model.dim),
            obs.observation,
            obs.noise_std,
            exact_cov=exact_cov if g_cfg.exact_jacobian or isinstance(g_cfg.rule, Optimal) else None,
            tracked_cov=tracked,
            clip=g_cfg.clip,
            fallback=g_cfg.fallback,
            threshold=g_cfg.threshold,
        )
        self.last_scale = float(np.nanmean(np.max(np.abs(sigma**2 * g), axis=-1)))
        self.last_fallback = float(np.mean(fell_back))
        return score + g


def sample(config: SamplerConfig, model, n_samples: int, record_covariance: bool = False) -> SampleResult:
    """Run ``n_samples`` trajectories from ``N(0, sigma_max^2 I)`` down the grid."""
    rng = np.random.default_rng(config.seed)
    grid = config.grid
    x = grid.sigma_max * rng.standard_normal((n_samples, model.dim))
    guide = _Guide(config, model, n_samples, record_covariance)
    corrector_feeds = config.tracker is None or config.tracker.heun_corrector_updates
    aborted = np.zeros(n_samples, dtype=bool)
    records = []
    with np.errstate(invalid="ignore", over="ignore"):
        for i, (t, t_next) in enumerate(grid.intervals()):
            if config.solver is Solver.HEUN:
                calls = iter((True, corrector_feeds))
                x, _ = heun_step(x, t, t_next, lambda z, s: guide(z, s, next(calls)))
            else:
                total = guide(x, t)
                if config.solver is Solver.EULER:
                    x, _ = euler_step(x, t, t_next, total)
                else:
                    x, _ = euler_maruyama_step(x, t, t_next, total, rng)
            aborted |= ~np.all(np.isfinite(x), axis=-1)
            # parked at a finite point so batched oracle calls stay valid
            x[aborted] = 0.0
            records.append(
                StepRecord(i, float(t), guide.last_scale, guide.last_fallback, guide.last_accepted, int(aborted.sum()))
            )
    x[aborted] = np.nan
    return SampleResult(x, aborted, records, guide.covariances)


# ------------------------------------------------- single-trajectory loops


def _guided(cov, mean, x, sigma, obs, exact_cov, fallback, threshold, solver):
    moments = DenoiserMoments(mean, DenseSymMatrix(cov), sigma, x)
    jac = Jacobian.EXACT if exact_cov is not None else Jacobian.COVARIANCE
    return reconstruction_guidance(moments, obs, jac, None, exact_cov, fallback, threshold, solver).gradient


def free_hunch_euler(
    model,
    obs: LinearObservation,
    init_cov,
    grid: TimeGrid,
    x,
    init_sigma: float = math.inf,
    space_update_range=(1.0, 5.0),
    curvature_tolerance: float = 1e-8,
    exact_jacobian: bool = True,
    fallback: bool = True,
    threshold: float = 1.0,
    solver: str = "direct",
):
    """Euler sampler with the tracker updates written inline.

    Returns the final state and the list of visited points.
    """
    x = np.asarray(x, dtype=float)
    cov = np.asarray(init_cov, dtype=float)
    sigma_cov = init_sigma
    mu_prev = x_prev = None
    lo, hi = space_update_range
    path = [x]
    for t, t_next in grid.intervals():
        mean, exact = model.denoiser(x, t)
        score = (mean - x) / t**2
        if mu_prev is None:
            cov = dense_time_update_cov(cov, sigma_cov, t)
        else:
            transferred = dense_transfer_mean(cov, mu_prev, x_prev, sigma_cov, t)
            cov = dense_time_update_cov(cov, sigma_cov, t)
            if lo <= t <= hi:
                cov, _ = dense_bfgs_update(cov, x - x_prev, t**2 * (mean - transferred), curvature_tolerance)
        sigma_cov = t
        mu_prev, x_prev = mean, x
        g = _guided(cov, mean, x, t, obs, exact if exact_jacobian else None, fallback, threshold, solver)
        x, _ = euler_step(x, t, t_next, score + g)
        path.append(x)
    return x, path


def tracked_euler(
    model,
    obs: LinearObservation,
    strategy: InitStrategy,
    grid: TimeGrid,
    x,
    init_sigma: float = math.inf,
    space_update_range=(1.0, 5.0),
    curvature_tolerance: float = 1e-8,
    exact_jacobian: bool = True,
    fallback: bool = True,
    threshold: float = 1.0,
    solver: str = "direct",
):
    """External Euler loop feeding every denoiser call to a :class:`TrackerState`."""
    x = np.asarray(x, dtype=float)
    state = new_tracker(
        strategy,
        model.dim,
        init_sigma,
        space_update_range=tuple(space_update_range),
        curvature_tolerance=curvature_tolerance,
    )
    path = [x]
    for t, t_next in grid.intervals():
        mean, exact = model.denoiser(x, t)
        score = (mean - x) / t**2
        state, moments = process_denoiser(state, mean, x, t)
        cov = to_dense(moments.covariance).entries
        g = _guided(cov, mean, x, t, obs, exact if exact_jacobian else None, fallback, threshold, solver)
        x, _ = euler_step(x, t, t_next, score + g)
        path.append(x)
    return x, path
