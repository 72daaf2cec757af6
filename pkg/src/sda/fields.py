"""Trajectory containers, normalization statistics, and the SDAT1 on-disk format.

A trajectory is a 4-axis array of physical field values indexed
``(t, v, i, j)``: time step, variable, latitude row, longitude column.
The SDAT1 file layout is one UTF-8 header line of space-separated
``key=value`` pairs terminated by a newline, followed by the raw payload
as little-endian IEEE-754 float32 in row-major ``(t, v, i, j)`` order.
Reading back a written file yields a bit-identical array.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError, WriteError

MAGIC_TRAJECTORY = "SDAT1"


@dataclass(frozen=True)
class TrajectoryTensor:
    """Immutable (L, V, H, W) field trajectory with variable metadata."""

    data: np.ndarray
    var_names: tuple[str, ...]
    dt_hours: float
    units: tuple[str, ...] = ()

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4:
            raise ShapeError(f"trajectory data must be 4-D (t,v,i,j), got ndim={data.ndim}")
        if min(data.shape) < 1:
            raise ShapeError(f"all trajectory dims must be >= 1, got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("trajectory contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "var_names", tuple(self.var_names))
        units = tuple(self.units) if self.units else ("1",) * data.shape[1]
        object.__setattr__(self, "units", units)
        if len(self.var_names) != data.shape[1]:
            raise ShapeError(
                f"{len(self.var_names)} variable names for V={data.shape[1]} variables"
            )
        if len(units) != data.shape[1]:
            raise ShapeError(f"{len(units)} unit strings for V={data.shape[1]} variables")
        if self.dt_hours <= 0:
            raise ValueError(f"dt_hours must be positive, got {self.dt_hours}")
        data.setflags(write=False)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "TrajectoryTensor":
        """Same metadata, new values (shape must keep V)."""
        return TrajectoryTensor(data, self.var_names, self.dt_hours, self.units)


@dataclass(frozen=True)
class NormStats:
    """Per-variable mean and positive standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.ndim != 1 or std.shape != mean.shape:
            raise ShapeError("mean and std must be 1-D arrays of equal length")
        if not (std > 0).all():
            raise ValueError("all std entries must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def from_trajectory(cls, x: TrajectoryTensor) -> "NormStats":
        """Global per-variable statistics over all frames and cells."""
        flat = x.data.astype(np.float64).transpose(1, 0, 2, 3).reshape(x.dims[1], -1)
        std = flat.std(axis=1)
        std[std == 0] = 1.0
        return cls(flat.mean(axis=1), std)


@dataclass(frozen=True)
class VariableMask:
    """Which of the V variables participate in conditioning."""

    included: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "included", tuple(bool(b) for b in self.included))

    @classmethod
    def all_true(cls, v: int) -> "VariableMask":
        return cls((True,) * v)

    @classmethod
    def all_false(cls, v: int) -> "VariableMask":
        return cls((False,) * v)

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(np.array(self.included, dtype=bool))

    @property
    def count(self) -> int:
        return int(sum(self.included))


def normalize(x: TrajectoryTensor, stats: NormStats) -> TrajectoryTensor:
    """Per-variable standardization: (x - mean[v]) / std[v]."""
    if stats.mean.shape[0] != x.dims[1]:
        raise ShapeError(f"stats for {stats.mean.shape[0]} variables, data has V={x.dims[1]}")
    out = (x.data.astype(np.float64) - stats.mean[None, :, None, None]) / stats.std[
        None, :, None, None
    ]
    return x.with_data(out.astype(np.float32))


def denormalize(x: TrajectoryTensor, stats: NormStats) -> TrajectoryTensor:
    """Inverse of :func:`normalize`."""
    if stats.mean.shape[0] != x.dims[1]:
        raise ShapeError(f"stats for {stats.mean.shape[0]} variables, data has V={x.dims[1]}")
    out = x.data.astype(np.float64) * stats.std[None, :, None, None] + stats.mean[
        None, :, None, None
    ]
    return x.with_data(out.astype(np.float32))


def _format_header(pairs: dict[str, str]) -> bytes:
    for key, value in pairs.items():
        if " " in value or "\n" in value or "=" in value:
            raise WriteError(f"header value for {key!r} contains reserved characters: {value!r}")
    line = " ".join(f"{k}={v}" for k, v in pairs.items())
    return (line + "\n").encode("utf-8")


def parse_header(line: bytes) -> dict[str, str]:
    """Split one SDAT-style header line into its key=value pairs."""
    try:
        text = line.decode("utf-8").rstrip("\n")
    except UnicodeDecodeError as exc:
        raise FormatError(f"header is not valid UTF-8: {exc}") from exc
    pairs: dict[str, str] = {}
    for token in text.split(" "):
        if "=" not in token:
            raise FormatError(f"malformed header token {token!r}")
        key, value = token.split("=", 1)
        pairs[key] = value
    return pairs


def read_header_line(fh) -> dict[str, str]:
    line = fh.readline(65536)
    if not line or not line.endswith(b"\n"):
        raise FormatError("missing or unterminated header line")
    return parse_header(line)


def write_trajectory(path: str | os.PathLike, x: TrajectoryTensor) -> None:
    """Write a trajectory as an SDAT1 file (header line + raw float32 payload)."""
    l, v, h, w = x.dims
    header = _format_header(
        {
            "magic": MAGIC_TRAJECTORY,
            "dims": f"{l},{v},{h},{w}",
            "vars": ",".join(x.var_names),
            "dt_hours": repr(float(x.dt_hours)),
            "units": ",".join(x.units),
        }
    )
    payload = np.ascontiguousarray(x.data, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc


def read_trajectory(path: str | os.PathLike) -> TrajectoryTensor:
    """Read an SDAT1 file; exact inverse of :func:`write_trajectory`."""
    try:
        with open(path, "rb") as fh:
            pairs = read_header_line(fh)
            payload = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if pairs.get("magic") != MAGIC_TRAJECTORY:
        raise FormatError(f"bad magic {pairs.get('magic')!r}, expected {MAGIC_TRAJECTORY!r}")
    try:
        dims = tuple(int(d) for d in pairs["dims"].split(","))
        dt_hours = float(pairs["dt_hours"])
        var_names = tuple(pairs["vars"].split(","))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed header fields: {exc}") from exc
    if len(dims) != 4:
        raise FormatError(f"dims must have 4 entries, got {pairs['dims']!r}")
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims)
    units = tuple(pairs["units"].split(",")) if "units" in pairs else ()
    return TrajectoryTensor(data, var_names, dt_hours, units)
