"""Quantile-mapping bias correction and the interpolation baseline.

The map is empirical: per variable, sorted source and reference quantiles at
levels (i + 0.5)/n_q. Applying it sends a value to the reference quantile at
the source value's level, with linear interpolation between table entries and
edge-slope extrapolation beyond them, which makes the map total and monotone.
An optional cycle-aware mode fits one table per position of a periodic cycle
(e.g. hour of day), pooling frames whose cycle position falls inside a
centered moving window.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError, WriteError
from .fields import TrajectoryTensor, read_header_line
from .observation import CoarseObservation, observed_frames

MAGIC_QUANTILE_MAP = "SDQM1"


@dataclass(frozen=True)
class QuantileMap:
    """Per-variable (and optionally per-cycle-position) quantile tables."""

    src: np.ndarray   # (V, C, n_q) nondecreasing along the last axis
    ref: np.ndarray   # (V, C, n_q)
    cycle_len: int = 1

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.float64)
        ref = np.asarray(self.ref, dtype=np.float64)
        if src.ndim != 3 or src.shape != ref.shape:
            raise ShapeError("quantile tables must both be (V, C, n_q)")
        if src.shape[1] != self.cycle_len:
            raise ShapeError(f"tables carry {src.shape[1]} cycle positions, "
                             f"cycle_len={self.cycle_len}")
        if np.any(np.diff(src, axis=2) < 0) or np.any(np.diff(ref, axis=2) < 0):
            raise ValueError("quantile tables must be nondecreasing")
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "ref", ref)

    @property
    def n_vars(self) -> int:
        return self.src.shape[0]

    @property
    def n_q(self) -> int:
        return self.src.shape[2]


def _pooled_frames(l: int, pos: int, cycle_len: int, pooling: int) -> np.ndarray:
    offsets = np.arange(l) % cycle_len
    half = pooling // 2
    dist = np.abs(offsets - pos)
    dist = np.minimum(dist, cycle_len - dist)
    return np.flatnonzero(dist <= half)


def fit_qm(source: TrajectoryTensor, reference: TrajectoryTensor, n_q: int = 256,
           pooling: int | None = None, cycle_len: int | None = None) -> QuantileMap:
    """Empirical quantiles at levels (i + 0.5)/n_q, aggregated over all cells.

    With ``cycle_len`` set, one table per cycle position is fitted from the
    frames within a centered moving window of ``pooling`` frames (in cycle
    position); without it a single global table per variable is used.
    """
    if source.dims[1] != reference.dims[1]:
        raise ShapeError(f"source has V={source.dims[1]}, reference V={reference.dims[1]}")
    levels = (np.arange(n_q) + 0.5) / n_q
    if cycle_len is None:
        cycle = 1
        groups = [np.arange(source.dims[0])]
        ref_groups = [np.arange(reference.dims[0])]
    else:
        cycle = int(cycle_len)
        window = pooling if pooling is not None else 1
        groups = [_pooled_frames(source.dims[0], c, cycle, window) for c in range(cycle)]
        ref_groups = [_pooled_frames(reference.dims[0], c, cycle, window) for c in range(cycle)]
    v = source.dims[1]
    src = np.empty((v, cycle, n_q))
    ref = np.empty((v, cycle, n_q))
    for c, (gs, gr) in enumerate(zip(groups, ref_groups)):
        for vi in range(v):
            src[vi, c] = np.quantile(source.data[gs, vi].astype(np.float64), levels)
            ref[vi, c] = np.quantile(reference.data[gr, vi].astype(np.float64), levels)
    return QuantileMap(src, ref, cycle)


def _map_values(values: np.ndarray, src: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Monotone table lookup with edge-slope linear extrapolation."""
    out = np.interp(values, src, ref)
    lo = values < src[0]
    hi = values > src[-1]
    if lo.any():
        d = src[1] - src[0]
        slope = (ref[1] - ref[0]) / d if d > 0 else 0.0
        out[lo] = ref[0] + slope * (values[lo] - src[0])
    if hi.any():
        d = src[-1] - src[-2]
        slope = (ref[-1] - ref[-2]) / d if d > 0 else 0.0
        out[hi] = ref[-1] + slope * (values[hi] - src[-1])
    return out


def apply_qm(x: TrajectoryTensor, qm: QuantileMap) -> TrajectoryTensor:
    """Map every value through its variable's (and cycle position's) table."""
    if x.dims[1] != qm.n_vars:
        raise ShapeError(f"map covers {qm.n_vars} variables, data has V={x.dims[1]}")
    out = np.empty(x.dims, dtype=np.float64)
    positions = np.arange(x.dims[0]) % qm.cycle_len
    for c in range(qm.cycle_len):
        frames = np.flatnonzero(positions == c)
        if frames.size == 0:
            continue
        for vi in range(qm.n_vars):
            vals = x.data[frames, vi].astype(np.float64)
            out[frames, vi] = _map_values(vals.ravel(), qm.src[vi, c],
                                          qm.ref[vi, c]).reshape(vals.shape)
    return x.with_data(out.astype(np.float32))


def _interp_weights(src_pos: np.ndarray, dst_pos: np.ndarray):
    """Clamped linear interpolation as (left index, right index, right weight)."""
    pos = np.clip(dst_pos, src_pos[0], src_pos[-1])
    i1 = np.clip(np.searchsorted(src_pos, pos, side="right"), 1, len(src_pos) - 1)
    i0 = i1 - 1
    width = src_pos[i1] - src_pos[i0]
    w1 = np.where(width > 0, (pos - src_pos[i0]) / np.where(width > 0, width, 1.0), 0.0)
    return i0, i1, w1


def _interp_axis(arr: np.ndarray, src_pos: np.ndarray, dst_pos: np.ndarray,
                 axis: int) -> np.ndarray:
    i0, i1, w1 = _interp_weights(src_pos, dst_pos)
    a0 = np.take(arr, i0, axis=axis)
    a1 = np.take(arr, i1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = len(dst_pos)
    w = w1.reshape(shape)
    return a0 * (1.0 - w) + a1 * w


def bcsd(y: CoarseObservation, qm: QuantileMap | None, target_l: int, target_h: int,
         target_w: int, var_names: tuple[str, ...] | None = None,
         dt_hours: float = 1.0) -> TrajectoryTensor:
    """Bias correction followed by spatial and temporal disaggregation.

    The quantile map is applied on the coarse grid, the fields are bilinearly
    interpolated to (target_h, target_w) with coarse values anchored at block
    centers, and frames are linearly interpolated from the observed times to
    the full target length (edges held).
    """
    spec = y.spec
    lc, vc, hc, wc = y.data.shape
    b = spec.block
    if target_h != hc * b or target_w != wc * b:
        raise ShapeError(f"target {target_h}x{target_w} incompatible with "
                         f"{hc}x{wc} blocks of size {b}")
    if target_l < 1 or observed_frames(spec, target_l).shape[0] != lc:
        raise ShapeError(f"target length {target_l} incompatible with {lc} observed frames")
    names = var_names or tuple(f"v{i}" for i in range(vc))
    coarse = TrajectoryTensor(y.data, names, dt_hours * spec.stride_t)
    if qm is not None:
        if qm.n_vars != vc:
            raise ShapeError(f"map covers {qm.n_vars} variables, observation has {vc}")
        coarse = apply_qm(coarse, qm)
    arr = coarse.data.astype(np.float64)
    centers_h = (np.arange(hc) + 0.5) * b - 0.5
    centers_w = (np.arange(wc) + 0.5) * b - 0.5
    arr = _interp_axis(arr, centers_h, np.arange(target_h, dtype=np.float64), axis=2)
    arr = _interp_axis(arr, centers_w, np.arange(target_w, dtype=np.float64), axis=3)
    times = observed_frames(spec, target_l).astype(np.float64)
    arr = _interp_axis(arr, times, np.arange(target_l, dtype=np.float64), axis=0)
    return TrajectoryTensor(arr.astype(np.float32), names, dt_hours)


def write_quantile_map(path: str | os.PathLike, qm: QuantileMap) -> None:
    v, c, n_q = qm.src.shape
    header = (f"magic={MAGIC_QUANTILE_MAP} dims={v},{c},{n_q} "
              f"cycle_len={qm.cycle_len}\n")
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("utf-8"))
            fh.write(np.ascontiguousarray(qm.src, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(qm.ref, dtype="<f4").tobytes())
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc


def read_quantile_map(path: str | os.PathLike) -> QuantileMap:
    try:
        with open(path, "rb") as fh:
            pairs = read_header_line(fh)
            payload = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if pairs.get("magic") != MAGIC_QUANTILE_MAP:
        raise FormatError(f"bad magic {pairs.get('magic')!r}")
    dims = tuple(int(d) for d in pairs["dims"].split(","))
    n = int(np.prod(dims))
    if len(payload) != 2 * n * 4:
        raise FormatError(f"payload is {len(payload)} bytes, header implies {2 * n * 4}")
    src = np.frombuffer(payload, dtype="<f4", count=n).reshape(dims).astype(np.float64)
    ref = np.frombuffer(payload, dtype="<f4", count=n, offset=n * 4).reshape(dims)
    return QuantileMap(src, ref.astype(np.float64), int(pairs["cycle_len"]))
