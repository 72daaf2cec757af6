"""Synthetic spatiotemporal fields with known statistics.

Fields live on a periodic H x W grid. Each variable mixes one shared
advected latent field with an independent field of its own, so variables
are cross-correlated with coefficient ``shared_weight`` while every
variable's stationary marginal is exactly N(0, 1) before the optional
deterministic diurnal cycle is added. Dynamics are AR(1) in time with
spatially correlated innovations, advection is a spectral (exact, periodic)
shift, and the first ``5 * time_scale`` frames are discarded as burn-in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError
from .fields import TrajectoryTensor
from .observation import CoarseObservation, ObservationSpec, coarsen

PROCESSES = ("gp_advection", "stochastic_heat")


@dataclass(frozen=True)
class SynthConfig:
    l: int = 64
    v: int = 2
    h: int = 32
    w: int = 32
    process: str = "gp_advection"
    advect: tuple[float, ...] = ()     # zonal cells/frame, one per variable
    length_scale: float = 4.0
    time_scale: float = 8.0
    shared_weight: float = 0.6
    diurnal_amplitude: float = 0.0
    diurnal_period_hours: float = 24.0
    dt_hours: float = 1.0
    seed: int = 0
    var_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.process not in PROCESSES:
            raise DomainError(f"unknown process {self.process!r}; choose from {PROCESSES}")
        if self.length_scale <= 0 or self.time_scale <= 0:
            raise ValueError("length_scale and time_scale must be positive")
        if not 0.0 <= self.shared_weight <= 1.0:
            raise ValueError("shared_weight must lie in [0, 1]")
        advect = tuple(self.advect) if self.advect else (0.0,) * self.v
        if len(advect) != self.v:
            raise ShapeError(f"{len(advect)} advection velocities for V={self.v}")
        object.__setattr__(self, "advect", advect)
        names = tuple(self.var_names) if self.var_names else tuple(
            f"v{i}" for i in range(self.v))
        if len(names) != self.v:
            raise ShapeError(f"{len(names)} names for V={self.v}")
        object.__setattr__(self, "var_names", names)

    @property
    def burn_in(self) -> int:
        return int(5 * self.time_scale)


def _spectral_scale(h: int, w: int, length_scale: float) -> np.ndarray:
    """Isotropic spectral amplitude with unit stationary marginal variance."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    g = np.exp(-0.5 * (np.pi * length_scale) ** 2 * (fy * fy + fx * fx))
    return g / np.sqrt((g * g).mean())


def _correlated_field(rng: np.random.Generator, g: np.ndarray) -> np.ndarray:
    white = rng.standard_normal(g.shape)
    return np.fft.ifft2(np.fft.fft2(white) * g).real


def _shift_phase(h: int, w: int, vx: float) -> np.ndarray:
    fx = np.fft.fftfreq(w)[None, :]
    return np.exp(-2j * np.pi * fx * vx) * np.ones((h, 1))


def _advect(field: np.ndarray, phase: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(np.fft.fft2(field) * phase).real


def generate(cfg: SynthConfig) -> TrajectoryTensor:
    """Simulate a trajectory; deterministic per seed, stationary after burn-in."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.h, cfg.w
    g = _spectral_scale(h, w, cfg.length_scale)
    rho = np.exp(-1.0 / cfg.time_scale)
    innov = np.sqrt(1.0 - rho * rho)
    w_shared = np.sqrt(cfg.shared_weight)
    w_indep = np.sqrt(1.0 - cfg.shared_weight)

    if cfg.process == "gp_advection":
        phases = [_shift_phase(h, w, vx) for vx in cfg.advect]
        shared_phase = phases[0]
        shared = _correlated_field(rng, g)
        indep = [_correlated_field(rng, g) for _ in range(cfg.v)]
        frames = np.empty((cfg.l, cfg.v, h, w), dtype=np.float64)
        for t in range(cfg.burn_in + cfg.l):
            shared = rho * _advect(shared, shared_phase) + innov * _correlated_field(rng, g)
            for vi in range(cfg.v):
                indep[vi] = (rho * _advect(indep[vi], phases[vi])
                             + innov * _correlated_field(rng, g))
            if t >= cfg.burn_in:
                for vi in range(cfg.v):
                    frames[t - cfg.burn_in, vi] = w_shared * shared + w_indep * indep[vi]
    else:  # stochastic_heat: mode-wise AR(1), small scales decay faster
        fy = np.fft.fftfreq(h)[:, None]
        fx = np.fft.fftfreq(w)[None, :]
        rate = (1.0 + (2.0 * np.pi * cfg.length_scale) ** 2 * (fy * fy + fx * fx)) / cfg.time_scale
        rho_k = np.exp(-rate)
        innov_k = np.sqrt(1.0 - rho_k * rho_k)

        def fresh():
            return np.fft.fft2(rng.standard_normal((h, w))) * g

        def step(z):
            return rho_k * z + innov_k * fresh()

        shared_z = fresh()
        indep_z = [fresh() for _ in range(cfg.v)]
        frames = np.empty((cfg.l, cfg.v, h, w), dtype=np.float64)
        for t in range(cfg.burn_in + cfg.l):
            shared_z = step(shared_z)
            indep_z = [step(z) for z in indep_z]
            if t >= cfg.burn_in:
                sh = np.fft.ifft2(shared_z).real
                for vi in range(cfg.v):
                    frames[t - cfg.burn_in, vi] = (w_shared * sh
                                                   + w_indep * np.fft.ifft2(indep_z[vi]).real)

    if cfg.diurnal_amplitude:
        t_hours = np.arange(cfg.l) * cfg.dt_hours
        for vi in range(cfg.v):
            phase = 2.0 * np.pi * vi / cfg.v
            cycle = cfg.diurnal_amplitude * np.sin(
                2.0 * np.pi * t_hours / cfg.diurnal_period_hours + phase)
            frames[:, vi] += cycle[:, None, None]
    return TrajectoryTensor(frames.astype(np.float32), cfg.var_names, cfg.dt_hours)


def make_pair(cfg: SynthConfig, spec: ObservationSpec) -> tuple[TrajectoryTensor, CoarseObservation]:
    """Paired fine trajectory and its exact coarse observation."""
    fine = generate(cfg)
    return fine, coarsen(fine, spec)
