"""Reverse-time generation with posterior guidance.

The predictor integrates the probability-flow update
``x <- x + dtau * [f(x, tau) - 0.5 * g(tau)**2 * score]`` on a uniform tau
grid from 1 down to ``tau_min``; after each predictor step an optional
Langevin corrector with SNR-scaled step size is applied. Conditioning adds
the observation-model gradient, evaluated at the posterior-mean estimate of
the clean state, to the prior score; the score network itself is never
differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffusion import DEFAULT_SCHEDULE
from .errors import NumericalError, ShapeError
from .fields import TrajectoryTensor
from .observation import CoarseObservation, log_likelihood_grad_wrt_xhat
from .sequence import ComposeConfig, compose_score

ALPHA_FLOOR = 1e-6


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 256
    guidance_scale: float = 1.0
    corrector_steps: int = 1
    corrector_snr: float = 0.1
    seed: int = 0
    tau_min: float = 1e-3

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("steps must be >= 2")
        if self.guidance_scale <= 0 or self.corrector_snr <= 0:
            raise ValueError("guidance_scale and corrector_snr must be positive")
        if self.corrector_steps < 0:
            raise ValueError("corrector_steps must be >= 0")


def xhat0(x_tau: np.ndarray, tau: float, score: np.ndarray,
          schedule=DEFAULT_SCHEDULE) -> np.ndarray:
    """Posterior-mean estimate of the clean state:
    ``(x_tau + sigma(tau)**2 * score) / alpha(tau)``."""
    x_tau = np.asarray(x_tau)
    score = np.asarray(score)
    if score.shape != x_tau.shape:
        raise ShapeError(f"score shape {score.shape} != state shape {x_tau.shape}")
    a = float(schedule.alpha(tau))
    if a < ALPHA_FLOOR:
        raise NumericalError(f"alpha(tau)={a:g} below {ALPHA_FLOOR:g}; state not recoverable")
    s2 = float(schedule.sigma(tau)) ** 2
    return (x_tau + x_tau.dtype.type(s2) * score) / x_tau.dtype.type(a)


def posterior_score(net, x_tau: np.ndarray, tau: float, y: CoarseObservation | None,
                    compose: ComposeConfig, cfg: SamplerConfig,
                    schedule=DEFAULT_SCHEDULE, prior_score_fn=None) -> np.ndarray:
    """Prior score plus the approximate likelihood score.

    ``prior_score_fn(x, tau)``, when given, replaces the composed network
    score (used with analytically known priors). No gradient flows through
    the score model: the guidance is a closed-form function of its output.
    """
    if prior_score_fn is not None:
        prior = np.asarray(prior_score_fn(x_tau, tau))
    else:
        prior = compose_score(net, x_tau, tau, compose)
    if y is None or y.spec.mask.count == 0:
        return prior
    est0 = xhat0(x_tau, tau, prior, schedule)
    grad = log_likelihood_grad_wrt_xhat(y, est0)
    a = float(schedule.alpha(tau))
    guidance = grad * (cfg.guidance_scale / a)
    return prior + guidance.astype(prior.dtype)


def sample_chain(score_fn, shape: tuple, cfg: SamplerConfig, rng: np.random.Generator,
                 schedule=DEFAULT_SCHEDULE, dtype=np.float64, batch_ndim: int = 0) -> np.ndarray:
    """Predictor-corrector integration of the reverse process.

    ``score_fn(x, tau)`` returns the (posterior) score for a state of the
    given shape. With ``batch_ndim > 0`` the leading axes index independent
    chains and corrector step sizes are computed per chain.
    """
    x = rng.standard_normal(shape).astype(dtype)
    taus = np.linspace(1.0, cfg.tau_min, cfg.steps + 1)
    reduce_axes = tuple(range(batch_ndim, len(shape)))

    def norms(arr):
        return np.sqrt((arr.astype(np.float64) ** 2).sum(axis=reduce_axes, keepdims=True))

    for i in range(cfg.steps):
        t0, t1 = taus[i], taus[i + 1]
        score = np.asarray(score_fn(x, float(t0)))
        beta = float(schedule.beta(t0))
        x = x + dtype(-(t1 - t0) * 0.5 * beta) * (x + score.astype(dtype))
        for _ in range(cfg.corrector_steps):
            score = np.asarray(score_fn(x, float(t1))).astype(np.float64)
            z = rng.standard_normal(shape)
            s_norm = norms(score)
            eta = np.where(
                s_norm > 0.0,
                2.0 * (cfg.corrector_snr * norms(z) / np.maximum(s_norm, 1e-300)) ** 2,
                0.0,
            )
            x = (x + eta * score + np.sqrt(2.0 * eta) * z).astype(dtype)
        if not np.isfinite(x).all():
            raise NumericalError(f"sampler diverged at tau={t1:g}")
    return x


def sample(net, l: int, shape: tuple[int, int, int], y: CoarseObservation | None = None,
           cfg: SamplerConfig = SamplerConfig(), compose: ComposeConfig | None = None,
           schedule=DEFAULT_SCHEDULE, prior_score_fn=None,
           var_names: tuple[str, ...] | None = None, dt_hours: float = 1.0) -> TrajectoryTensor:
    """Draw one trajectory sample in normalized space.

    With ``y`` (a normalized-space observation) the reverse process is
    guided toward observation consistency; with ``y=None`` it samples the
    unconditional prior. Deterministic for a fixed config seed.
    """
    v, h, w = shape
    compose = compose or ComposeConfig(k=net.k)
    if prior_score_fn is None and l < 2 * compose.k + 1:
        raise ShapeError(f"need L >= 2k+1 = {2 * compose.k + 1}, got L={l}")
    if y is not None and y.origin_l != l:
        raise ShapeError(f"observation was taken from L={y.origin_l}, sampling L={l}")
    rng = np.random.default_rng(cfg.seed)

    def score_fn(x, tau):
        return posterior_score(net, x, tau, y, compose, cfg, schedule, prior_score_fn)

    data = sample_chain(score_fn, (l, v, h, w), cfg, rng, schedule, dtype=np.float32)
    names = var_names or tuple(f"v{i}" for i in range(v))
    return TrajectoryTensor(data, names, dt_hours)
