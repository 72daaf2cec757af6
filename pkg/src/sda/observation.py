"""Coarsening observation operator and the Gaussian observation model.

The operator keeps every ``stride_t``-th frame (anchored at ``phase``),
drops masked-out variables, and replaces each ``block x block`` spatial
patch by its arithmetic mean. Conditioning treats the observation as the
operator output plus independent Gaussian noise with per-variable standard
deviation, so the log-likelihood gradient is a broadcast of the weighted
residual back into the fine cells of observed frames.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import FormatError, ShapeError, WriteError
from .fields import (MAGIC_TRAJECTORY, TrajectoryTensor, VariableMask, NormStats,
                     parse_header, read_header_line)


@dataclass(frozen=True)
class ObservationSpec:
    """Parameters of the coarsening operator and its noise model."""

    block: int
    stride_t: int
    noise_std: np.ndarray
    mask: VariableMask
    phase: int = 0

    def __post_init__(self):
        if self.block < 1 or self.stride_t < 1:
            raise ValueError("block and stride_t must be >= 1")
        if self.phase < 0:
            raise ValueError("phase must be >= 0")
        noise = np.asarray(self.noise_std, dtype=np.float64)
        if noise.ndim != 1 or len(self.mask.included) != noise.shape[0]:
            raise ShapeError("noise_std must be 1-D with one entry per variable")
        if not (noise > 0).all():
            raise ValueError("noise_std entries must be positive")
        object.__setattr__(self, "noise_std", noise)

    @property
    def n_vars(self) -> int:
        return len(self.mask.included)


@dataclass(frozen=True)
class CoarseObservation:
    """Observed coarse trajectory with the operator that produced it."""

    data: np.ndarray
    spec: ObservationSpec
    origin_l: int

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        expected = (observed_frame_count(self.spec, self.origin_l), self.spec.mask.count)
        if data.ndim != 4 or data.shape[:2] != expected:
            raise ShapeError(
                f"coarse data shape {data.shape} inconsistent with spec "
                f"(expected leading dims {expected})"
            )
        object.__setattr__(self, "data", data)


def observed_frames(spec: ObservationSpec, l: int) -> np.ndarray:
    """0-based fine-frame indices retained by the temporal subsampling."""
    return np.arange(spec.phase, l, spec.stride_t)


def observed_frame_count(spec: ObservationSpec, l: int) -> int:
    if spec.phase >= l:
        return 0
    return int(-(-(l - spec.phase) // spec.stride_t))


def observed_shape(spec: ObservationSpec, dims: tuple[int, int, int, int]) -> tuple:
    """Shape of the observation for a fine trajectory of the given dims."""
    l, v, h, w = dims
    if v != spec.n_vars:
        raise ShapeError(f"spec covers {spec.n_vars} variables, data has V={v}")
    if h % spec.block or w % spec.block:
        raise ShapeError(f"H={h}, W={w} not divisible by block={spec.block}")
    return (observed_frame_count(spec, l), spec.mask.count, h // spec.block, w // spec.block)


def information_ratio(spec: ObservationSpec) -> int:
    """Fine values summarized per observed value: block**2 * stride_t."""
    return spec.block * spec.block * spec.stride_t


def apply_operator(arr: np.ndarray, spec: ObservationSpec) -> np.ndarray:
    """The operator h on a raw (L, V, H, W) array; float64 accumulation."""
    arr = np.asarray(arr)
    lc, vc, hc, wc = observed_shape(spec, arr.shape)
    b = spec.block
    picked = arr[observed_frames(spec, arr.shape[0])][:, spec.mask.indices]
    return picked.reshape(lc, vc, hc, b, wc, b).mean(axis=(3, 5), dtype=np.float64)


def coarsen(x: TrajectoryTensor, spec: ObservationSpec) -> CoarseObservation:
    """Noiseless observation of a trajectory (noise_std is used only when
    conditioning)."""
    coarse = apply_operator(x.data, spec).astype(np.float32)
    return CoarseObservation(coarse, spec, x.dims[0])


def log_likelihood_grad_wrt_xhat(y: CoarseObservation, xhat0: np.ndarray) -> np.ndarray:
    """Gradient of the Gaussian observation log-density wrt the fine state.

    Equals (Y - h(xhat0)) / noise_std**2 / block**2 spread over each fine
    cell of observed frames; exactly zero on unobserved frames and on
    masked-out variables.
    """
    xhat0 = np.asarray(xhat0)
    spec = y.spec
    if xhat0.ndim != 4 or xhat0.shape[0] != y.origin_l:
        raise ShapeError(f"xhat0 must be ({y.origin_l}, V, H, W), got {xhat0.shape}")
    if observed_shape(spec, xhat0.shape) != y.data.shape:
        raise ShapeError("xhat0 dims inconsistent with the observation")
    b = spec.block
    residual = y.data.astype(np.float64) - apply_operator(xhat0, spec)
    weights = spec.noise_std[spec.mask.indices] ** 2 * (b * b)
    coarse_grad = residual / weights[None, :, None, None]
    fine = np.repeat(np.repeat(coarse_grad, b, axis=2), b, axis=3)
    grad = np.zeros(xhat0.shape, dtype=np.float64)
    frames = observed_frames(spec, xhat0.shape[0])
    grad[np.ix_(frames, spec.mask.indices)] = fine
    return grad


def normalize_observation(y: CoarseObservation, stats: NormStats) -> CoarseObservation:
    """Rescale a physical-space observation into the model's normalized space.

    Block means commute with the per-variable affine normalization, so the
    normalized observation is (Y - mean[v]) / std[v] with noise_std scaled
    by 1/std[v].
    """
    if stats.mean.shape[0] != y.spec.n_vars:
        raise ShapeError("stats do not cover the observation's variables")
    idx = y.spec.mask.indices
    data = (y.data.astype(np.float64) - stats.mean[idx][None, :, None, None]) / \
        stats.std[idx][None, :, None, None]
    spec = replace(y.spec, noise_std=y.spec.noise_std / stats.std)
    return CoarseObservation(data.astype(np.float32), spec, y.origin_l)


MAGIC_OBSERVATION = MAGIC_TRAJECTORY  # same container, extra header keys


def write_observation(path: str | os.PathLike, y: CoarseObservation,
                      var_names: tuple[str, ...], dt_hours: float) -> None:
    """SDAT1 container with block=, stride_t=, phase=, mask= header keys.

    ``var_names`` are the observed (unmasked) variable names; ``dt_hours``
    is the fine-grid step, the file records the coarse step.
    """
    spec = y.spec
    if len(var_names) != y.data.shape[1]:
        raise ShapeError("one name per observed variable required")
    lc, vc, hc, wc = y.data.shape
    header = " ".join([
        f"magic={MAGIC_OBSERVATION}",
        f"dims={lc},{vc},{hc},{wc}",
        f"vars={','.join(var_names)}",
        f"dt_hours={dt_hours * spec.stride_t!r}",
        f"block={spec.block}",
        f"stride_t={spec.stride_t}",
        f"phase={spec.phase}",
        f"mask={','.join('1' if m else '0' for m in spec.mask.included)}",
        f"noise_std={','.join(repr(float(s)) for s in spec.noise_std)}",
        f"origin_l={y.origin_l}",
    ]) + "\n"
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("utf-8"))
            fh.write(np.ascontiguousarray(y.data, dtype="<f4").tobytes())
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc


def read_observation(path: str | os.PathLike) -> tuple[CoarseObservation, tuple[str, ...], float]:
    """Inverse of :func:`write_observation`.

    Returns (observation, observed var names, fine dt_hours).
    """
    try:
        with open(path, "rb") as fh:
            pairs = read_header_line(fh)
            payload = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if pairs.get("magic") != MAGIC_OBSERVATION:
        raise FormatError(f"bad magic {pairs.get('magic')!r}")
    required = {"dims", "vars", "dt_hours", "block", "stride_t", "phase", "mask",
                "noise_std", "origin_l"}
    missing = required - pairs.keys()
    if missing:
        raise FormatError(f"missing observation header keys: {sorted(missing)}")
    dims = tuple(int(d) for d in pairs["dims"].split(","))
    if len(dims) != 4:
        raise FormatError(f"dims must have 4 entries, got {pairs['dims']!r}")
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, header implies {expected}")
    mask = VariableMask(tuple(tok == "1" for tok in pairs["mask"].split(",")))
    spec = ObservationSpec(
        block=int(pairs["block"]), stride_t=int(pairs["stride_t"]),
        noise_std=np.array([float(s) for s in pairs["noise_std"].split(",")]),
        mask=mask, phase=int(pairs["phase"]),
    )
    data = np.frombuffer(payload, dtype="<f4").reshape(dims)
    y = CoarseObservation(data, spec, int(pairs["origin_l"]))
    stride = spec.stride_t
    return y, tuple(pairs["vars"].split(",")) if dims[1] else (), float(pairs["dt_hours"]) / stride
