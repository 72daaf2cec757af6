"""Forward diffusion process: noise schedule, perturbation kernel, and the
denoising score-matching objective.

The schedule is variance preserving, ``alpha(t)**2 + sigma(t)**2 = 1``, so the
terminal law at t=1 is a standard normal and a state can be perturbed to any
noise level in one shot: ``x_t = alpha(t) * x0 + sigma(t) * eps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

# Training never samples below this noise level: the score target eps/sigma(t)
# diverges as sigma -> 0.
TAU_TRAIN_MIN = 1e-3


@dataclass(frozen=True)
class VpCosineSchedule:
    """Variance-preserving cosine schedule.

    ``alpha(t) = cos(pi*t/2) * (1 - eps_s) + eps_s * (1 - t)`` clamped from
    below at ``alpha_min`` so that alpha(1) = alpha_min instead of 0. The
    clamp keeps the 1/alpha factors of posterior-mean estimation finite at
    the noisiest grid point.
    """

    eps_s: float = 1e-3
    alpha_min: float = 1e-3
    kind: str = "vp-cosine"

    def alpha(self, tau):
        tau = np.asarray(tau, dtype=np.float64)
        raw = np.cos(0.5 * math.pi * tau) * (1.0 - self.eps_s) + self.eps_s * (1.0 - tau)
        return np.maximum(raw, self.alpha_min)

    def sigma(self, tau):
        a = self.alpha(tau)
        return np.sqrt(np.maximum(1.0 - a * a, 0.0))

    def beta(self, tau):
        """Instantaneous rate -2 * d(log alpha)/dtau; zero on the clamped tail."""
        tau = np.asarray(tau, dtype=np.float64)
        raw = np.cos(0.5 * math.pi * tau) * (1.0 - self.eps_s) + self.eps_s * (1.0 - tau)
        d_raw = -0.5 * math.pi * np.sin(0.5 * math.pi * tau) * (1.0 - self.eps_s) - self.eps_s
        clamped = raw <= self.alpha_min
        return np.where(clamped, 0.0, -2.0 * d_raw / np.maximum(raw, self.alpha_min))


DEFAULT_SCHEDULE = VpCosineSchedule()

_SCHEDULES = {"vp-cosine": VpCosineSchedule}


def make_schedule(kind: str):
    if kind not in _SCHEDULES:
        raise DomainError(f"unknown schedule kind {kind!r}")
    return _SCHEDULES[kind]()


def perturb(x0: np.ndarray, tau: float, noise: np.ndarray, schedule=DEFAULT_SCHEDULE) -> np.ndarray:
    """One-shot forward perturbation ``alpha(tau)*x0 + sigma(tau)*noise``."""
    if not 0.0 <= tau <= 1.0:
        raise DomainError(f"tau must lie in [0, 1], got {tau}")
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {noise.shape} != data shape {x0.shape}")
    a = x0.dtype.type(schedule.alpha(tau))
    s = x0.dtype.type(schedule.sigma(tau))
    return a * x0 + s * noise


def dsm_loss(net, windows: np.ndarray, taus: np.ndarray, noises: np.ndarray,
             schedule=DEFAULT_SCHEDULE):
    """Denoising score-matching loss and its exact parameter gradient.

    ``windows`` has shape (B, w, V, H, W) with w = net.window_frames; ``taus``
    is (B,) and ``noises`` matches ``windows``. The per-window loss is
    ``sigma(tau)**2 * sum((s_theta(x_t, tau) + eps/sigma(tau))**2)`` and the
    returned loss is the batch mean. Gradients are accumulated in batch order.

    Returns (loss, grads) where grads maps parameter names to arrays.
    """
    windows = np.asarray(windows)
    noises = np.asarray(noises)
    taus = np.asarray(taus, dtype=np.float64)
    if windows.ndim != 5:
        raise ShapeError(f"windows must be (B, w, V, H, W), got ndim={windows.ndim}")
    b, w, v, h, ww = windows.shape
    if w != net.window_frames:
        raise ShapeError(f"window length {w} != net window {net.window_frames}")
    if noises.shape != windows.shape:
        raise ShapeError("noises must match windows shape")
    if taus.shape != (b,):
        raise ShapeError(f"taus must be ({b},), got {taus.shape}")
    if np.any(taus <= 0.0) or np.any(taus > 1.0):
        raise DomainError("taus must lie in (0, 1] for a finite score target")

    grads = {name: np.zeros_like(p) for name, p in net.params.items()}
    total = 0.0
    for i in range(b):
        tau = float(taus[i])
        sig = float(schedule.sigma(tau))
        x0 = windows[i].reshape(w * v, h, ww)
        eps = noises[i].reshape(w * v, h, ww)
        x_t = perturb(x0, tau, eps, schedule)
        out, cache = net.forward_cached(x_t, tau)
        resid = out + eps.astype(out.dtype) / out.dtype.type(sig)
        total += sig * sig * float((resid.astype(np.float64) ** 2).sum())
        d_out = (2.0 * sig * sig / b) * resid
        _, g = net.backward(cache, d_out.astype(out.dtype))
        for name, val in g.items():
            grads[name] += val
    return total / b, grads
