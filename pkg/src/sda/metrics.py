"""Evaluation suite: rank calibration, spectra, distribution distances,
structural similarity, and wind-power analysis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DomainError, NumericalError, ShapeError
from .fields import TrajectoryTensor


# ---------------------------------------------------------------------------
# probability integral transform

def pit(samples, truth, cells=None, bins: int = 20,
        rng: np.random.Generator | None = None):
    """Randomized PIT histogram of the truth within an ensemble.

    ``samples`` is a stack (N, ...) of ensemble members, ``truth`` matches a
    member's shape and ``cells`` optionally selects a flat subset of cells.
    Ranks are jittered uniformly across ties, so an exchangeable ensemble
    yields exactly uniform values. Returns (bin masses summing to 1.0,
    pit values).
    """
    ens = np.stack([s.data if isinstance(s, TrajectoryTensor) else np.asarray(s)
                    for s in samples])
    tru = truth.data if isinstance(truth, TrajectoryTensor) else np.asarray(truth)
    n = ens.shape[0]
    if n < 2:
        raise DataError(f"need an ensemble of >= 2 members, got {n}")
    if ens.shape[1:] != tru.shape:
        raise ShapeError(f"members {ens.shape[1:]} vs truth {tru.shape}")
    ens = ens.reshape(n, -1)
    tru = tru.reshape(-1)
    if cells is not None:
        cells = np.asarray(cells).reshape(-1)
        ens = ens[:, cells]
        tru = tru[cells]
    rng = rng or np.random.default_rng(0)
    below = (ens < tru[None, :]).sum(axis=0)
    ties = (ens == tru[None, :]).sum(axis=0)
    u = rng.uniform(size=tru.shape[0])
    values = (below + u * (ties + 1)) / (n + 1)
    counts, _ = np.histogram(values, bins=bins, range=(0.0, 1.0))
    hist = counts / counts.sum()
    hist[np.argmax(hist)] += 1.0 - hist.sum()  # absorb float rounding exactly
    return hist, values


def ks_uniform(values: np.ndarray) -> float:
    """One-sample Kolmogorov-Smirnov distance to the standard uniform law."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    m = v.shape[0]
    if m == 0:
        raise DataError("no values")
    grid = np.arange(1, m + 1) / m
    return float(max(np.abs(grid - v).max(), np.abs(grid - 1.0 / m - v).max()))


def ks_critical(m: int, level: str = "1%") -> float:
    coeff = {"1%": 1.63, "5%": 1.36}[level]
    return coeff / np.sqrt(m)


# ---------------------------------------------------------------------------
# spectra

def rapsd(field: np.ndarray, max_radius: int | None = None, return_counts: bool = False):
    """Radially averaged power spectral density of a 2-D field.

    Power is ``|F|**2 / (H*W)``; modes are grouped into annuli by rounding
    the radial wavenumber, the DC mode is excluded. The returned wavenumbers
    run 1..min(H, W)//2 unless ``max_radius`` extends them (up to the grid
    corner, where the sum of power*count recovers the Parseval identity).
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2 or min(field.shape) < 4:
        raise ShapeError(f"need a 2-D field with H, W >= 4, got {field.shape}")
    h, w = field.shape
    power = np.abs(np.fft.fft2(field)) ** 2 / (h * w)
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    radius = np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2)
    ring = np.rint(radius).astype(int)
    k_max = max_radius if max_radius is not None else min(h, w) // 2
    k_max = min(k_max, int(ring.max()))
    total = np.bincount(ring.ravel(), weights=power.ravel(), minlength=k_max + 1)
    count = np.bincount(ring.ravel(), minlength=k_max + 1)
    ks = np.arange(1, k_max + 1)
    valid = count[1:k_max + 1] > 0
    curve = np.zeros(k_max)
    curve[valid] = total[1:k_max + 1][valid] / count[1:k_max + 1][valid]
    if return_counts:
        return ks, curve, count[1:k_max + 1]
    return ks, curve


def corner_radius(h: int, w: int) -> int:
    """Largest annulus index present on an h-by-w Fourier grid."""
    return int(np.rint(np.sqrt((h // 2) ** 2 + (w // 2) ** 2)))


def mean_rapsd(fields, **kwargs):
    """Mean RAPSD curve over a stack of 2-D fields."""
    fields = np.asarray(fields, dtype=np.float64)
    curves = [rapsd(f, **kwargs)[1] for f in fields.reshape(-1, *fields.shape[-2:])]
    ks = rapsd(fields.reshape(-1, *fields.shape[-2:])[0], **kwargs)[0]
    return ks, np.mean(curves, axis=0)


def melr(pred_curve: np.ndarray, ref_curve: np.ndarray) -> float:
    """Sum over wavenumbers of the absolute log energy ratio."""
    pred = np.asarray(pred_curve, dtype=np.float64)
    ref = np.asarray(ref_curve, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ShapeError(f"curves differ in length: {pred.shape} vs {ref.shape}")
    if np.any(pred <= 0) or np.any(ref <= 0):
        raise NumericalError("zero or negative energy bin; log ratio undefined")
    return float(np.abs(np.log(pred / ref)).sum())


# ---------------------------------------------------------------------------
# distribution distances

def _w1_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact 1-D Wasserstein-1 between two empirical distributions."""
    a = np.sort(a)
    b = np.sort(b)
    if a.shape == b.shape:
        return float(np.abs(a - b).mean())
    grid = np.sort(np.concatenate([a, b]))
    fa = np.searchsorted(a, grid, side="right") / a.shape[0]
    fb = np.searchsorted(b, grid, side="right") / b.shape[0]
    return float(np.sum(np.abs(fa - fb)[:-1] * np.diff(grid)))


def sliced_w1(a, b, n_slices: int = 64, seed: int = 0) -> float:
    """Sliced Wasserstein-1: average 1-D W1 over random unit directions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise DataError("empty sample set")
    a = a.reshape(a.shape[0], -1) if a.ndim > 1 else a.reshape(-1, 1)
    b = b.reshape(b.shape[0], -1) if b.ndim > 1 else b.reshape(-1, 1)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"flattened dims differ: {a.shape[1]} vs {b.shape[1]}")
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(n_slices):
        direction = rng.standard_normal(a.shape[1])
        direction /= np.linalg.norm(direction)
        total += _w1_1d(a @ direction, b @ direction)
    return total / n_slices


# ---------------------------------------------------------------------------
# structural similarity

def _window_sums(x: np.ndarray, k: int) -> np.ndarray:
    c = np.cumsum(np.cumsum(x, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


def ssim(a: np.ndarray, b: np.ndarray, window: int = 15, data_range: float = 1.0) -> float:
    """Mean structural similarity with uniform window statistics.

    Sliding k-by-k windows over valid positions; the usual luminance,
    contrast and structure terms with c1 = (0.01*data_range)**2 and
    c2 = (0.03*data_range)**2. Identical inputs give exactly 1.0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"need two equal 2-D fields, got {a.shape} and {b.shape}")
    if window % 2 == 0:
        raise DomainError(f"window must be odd, got {window}")
    if window > min(a.shape):
        raise DomainError(f"window {window} exceeds field size {a.shape}")
    k2 = float(window * window)
    mu_a = _window_sums(a, window) / k2
    mu_b = _window_sums(b, window) / k2
    var_a = _window_sums(a * a, window) / k2 - mu_a * mu_a
    var_b = _window_sums(b * b, window) / k2 - mu_b * mu_b
    cov = _window_sums(a * b, window) / k2 - mu_a * mu_b
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# wind power

@dataclass(frozen=True)
class PowerCurve:
    """Piecewise turbine curve: zero below cut-in, smooth cubic ramp to the
    rated speed, rated output to cut-out, zero above."""

    cut_in: float = 2.5
    rated_speed: float = 12.0
    cut_out: float = 25.0
    rated_power: float = 3.0e6

    def __post_init__(self):
        if not 0.0 <= self.cut_in < self.rated_speed < self.cut_out:
            raise ValueError("need 0 <= cut_in < rated_speed < cut_out")

    def __call__(self, speed) -> np.ndarray:
        v = np.asarray(speed, dtype=np.float64)
        t = np.clip((v - self.cut_in) / (self.rated_speed - self.cut_in), 0.0, 1.0)
        ramp = t * t * (3.0 - 2.0 * t)
        out = self.rated_power * ramp
        out = np.where((v < self.cut_in) | (v > self.cut_out), 0.0, out)
        return out


def wind_speed(uas: np.ndarray, vas: np.ndarray) -> np.ndarray:
    """Speed magnitude from zonal and meridional components."""
    return np.sqrt(np.asarray(uas, dtype=np.float64) ** 2
                   + np.asarray(vas, dtype=np.float64) ** 2)


@dataclass(frozen=True)
class WindPowerResult:
    expected_power: float
    cumulative: np.ndarray       # running mean-normalized sum of per-frame power
    bin_centers: np.ndarray
    density: np.ndarray          # histogram density of speeds
    weighted_curve: np.ndarray   # density * curve per bin


def wind_power(speeds: np.ndarray, curve: PowerCurve = PowerCurve(),
               bins: int = 60, v_max: float = 30.0) -> WindPowerResult:
    """Expected generated power of a speed series under a turbine curve.

    The expectation is taken over the empirical speed distribution; the
    cumulative series is the running sum of per-frame power normalized by
    the number of frames.
    """
    v = np.asarray(speeds, dtype=np.float64).ravel()
    if v.size == 0:
        raise DataError("empty speed series")
    if np.any(v < 0.0):
        raise DataError("negative wind speeds")
    per_frame = curve(v)
    expected = float(per_frame.mean())
    cumulative = np.cumsum(per_frame) / v.size
    hi = max(v_max, float(v.max()))
    density, edges = np.histogram(v, bins=bins, range=(0.0, hi), density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return WindPowerResult(expected, cumulative, centers, density, density * curve(centers))


# ---------------------------------------------------------------------------
# anomalies and reports

def anomaly(x: TrajectoryTensor, baseline: TrajectoryTensor) -> TrajectoryTensor:
    """Elementwise difference between a trajectory and a baseline."""
    if x.dims != baseline.dims:
        raise ShapeError(f"shapes differ: {x.dims} vs {baseline.dims}")
    return x.with_data(x.data.astype(np.float64) - baseline.data.astype(np.float64))


@dataclass
class MetricReport:
    """Named scalar metrics and named curves, JSON/CSV serializable."""

    scalars: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)

    def validate(self):
        for name, value in self.scalars.items():
            if not np.isfinite(value):
                raise NumericalError(f"scalar {name!r} is not finite")
        for name, cols in self.curves.items():
            for col, vals in cols.items():
                if not np.all(np.isfinite(vals)):
                    raise NumericalError(f"curve {name!r} column {col!r} has non-finite values")

    def to_json(self) -> str:
        payload = {
            "scalars": {k: float(v) for k, v in self.scalars.items()},
            "curves": {
                name: {col: [float(x) for x in vals] for col, vals in cols.items()}
                for name, cols in self.curves.items()
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def curve_csv(self, name: str) -> str:
        cols = self.curves[name]
        keys = list(cols)
        rows = zip(*[cols[k] for k in keys])
        lines = [",".join(keys)]
        lines.extend(",".join(repr(float(x)) for x in row) for row in rows)
        return "\n".join(lines) + "\n"


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["scalars", "curves"],
    "additionalProperties": False,
    "properties": {
        "scalars": {"type": "object", "additionalProperties": {"type": "number"}},
        "curves": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": {"type": "array", "items": {"type": "number"}},
            },
        },
    },
}
