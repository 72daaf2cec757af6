"""Windowed score model, checkpoint persistence, and the training loop.

The network estimates the score of a flattened window of w = 2k+1 frames:
input and output are both (w*V, H, W). It is a two-level mini U-Net built
from 3x3 stride-1 convolutions with SiLU activations, a 2x average-pool
down / nearest-neighbor up level pair, and a concatenation skip. The noise
level enters as 16 sinusoidal embedding channels appended to the input.
Forward and backward passes are written out by hand so parameter gradients
are exact and testable against finite differences.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .diffusion import DEFAULT_SCHEDULE, TAU_TRAIN_MIN, dsm_loss, make_schedule
from .errors import DataError, DomainError, FormatError, ShapeError, WriteError
from .fields import NormStats, TrajectoryTensor, parse_header

MAGIC_CHECKPOINT = "SDCK1"
EMB_DIM = 16


def tau_embedding(tau: float, dim: int = EMB_DIM) -> np.ndarray:
    """Sinusoidal embedding of the noise level on geometric frequencies."""
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    ang = tau * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _silu(x):
    s = np.exp(-np.logaddexp(x.dtype.type(0), -x))  # stable sigmoid
    return x * s, s


def _silu_grad(x, s):
    return s * (1.0 + x * (1.0 - s))


def _conv_forward(x, w, b):
    """3x3 stride-1 pad-1 convolution of a (C, H, W) map.

    Returns the output and the im2col matrix reused by the backward pass.
    The matmul shape depends only on (C, H, W), never on any batch size, so
    batched evaluation is bitwise identical to independent evaluations.
    """
    c, h, ww = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))
    cols = np.ascontiguousarray(cols.transpose(0, 3, 4, 1, 2)).reshape(c * 9, h * ww)
    y = w.reshape(cout, c * 9) @ cols + b[:, None]
    return y.reshape(cout, h, ww), cols


def _conv_backward(d_out, cols, w, x_shape):
    c, h, ww = x_shape
    cout = w.shape[0]
    dy = d_out.reshape(cout, h * ww)
    dw = (dy @ cols.T).reshape(w.shape)
    db = dy.sum(axis=1)
    dcols = (w.reshape(cout, c * 9).T @ dy).reshape(c, 3, 3, h, ww)
    dxp = np.zeros((c, h + 2, ww + 2), dtype=d_out.dtype)
    for di in range(3):
        for dj in range(3):
            dxp[:, di:di + h, dj:dj + ww] += dcols[:, di, dj]
    return dxp[:, 1:h + 1, 1:ww + 1], dw, db


def _avgpool2(x):
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def _avgpool2_backward(d_out):
    return np.repeat(np.repeat(d_out, 2, axis=1), 2, axis=2) * d_out.dtype.type(0.25)


def _upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _upsample2_backward(d_out):
    c, h, w = d_out.shape
    return d_out.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


# (layer name, in-channel key, out-channel key, activated?) in forward order.
_CONV_LAYERS = ("enc1", "enc2", "mid1", "mid2", "dec1", "out")


class ScoreNetwork:
    """Score estimate for a whole (w*V, H, W) window, jointly over frames."""

    def __init__(self, k: int, v: int, hidden: int = 24, params: dict | None = None,
                 dtype=np.float32, rng: np.random.Generator | None = None):
        if k < 1:
            raise DomainError(f"markov order k must be >= 1, got {k}")
        self.k = int(k)
        self.v = int(v)
        self.hidden = int(hidden)
        self.dtype = np.dtype(dtype)
        self.eval_count = 0
        if params is None:
            rng = rng or np.random.default_rng(0)
            params = self._init_params(rng)
        self.params = {name: np.asarray(p, dtype=self.dtype) for name, p in params.items()}

    @property
    def window_frames(self) -> int:
        return 2 * self.k + 1

    @property
    def window_channels(self) -> int:
        return self.window_frames * self.v

    def _channel_plan(self):
        c_in = self.window_channels + EMB_DIM
        c = self.hidden
        return {
            "enc1": (c_in, c),
            "enc2": (c, c),
            "mid1": (c, 2 * c),
            "mid2": (2 * c, 2 * c),
            "dec1": (3 * c, c),
            "out": (c, self.window_channels),
        }

    def _init_params(self, rng):
        params = {}
        for name, (cin, cout) in self._channel_plan().items():
            if name == "out":
                w = np.zeros((cout, cin, 3, 3))
            else:
                w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
            params[f"{name}.w"] = w
            params[f"{name}.b"] = np.zeros(cout)
        return params

    def astype(self, dtype) -> "ScoreNetwork":
        return ScoreNetwork(self.k, self.v, self.hidden,
                            params={n: p.copy() for n, p in self.params.items()}, dtype=dtype)

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[0] != self.window_channels:
            raise ShapeError(
                f"window must be ({self.window_channels}, H, W) for k={self.k}, V={self.v}; "
                f"got {x.shape}"
            )
        if x.shape[1] % 2 or x.shape[2] % 2:
            raise ShapeError(f"H and W must be divisible by 2, got {x.shape[1:]}")
        return x

    def forward_cached(self, x, tau):
        """Forward pass keeping per-layer buffers for the backward pass."""
        if not 0.0 <= tau <= 1.0:
            raise DomainError(f"tau must lie in [0, 1], got {tau}")
        x = self._check_input(x)
        self.eval_count += 1
        p = self.params
        h, w = x.shape[1:]
        emb = tau_embedding(tau).astype(self.dtype)
        z = np.concatenate([x, np.broadcast_to(emb[:, None, None], (EMB_DIM, h, w))], axis=0)
        cache = {"in_shape": z.shape}

        def conv_act(name, inp, activate=True):
            y, cols = _conv_forward(inp, p[f"{name}.w"], p[f"{name}.b"])
            cache[f"{name}.cols"] = cols
            cache[f"{name}.xshape"] = inp.shape
            if activate:
                out, s = _silu(y)
                cache[f"{name}.pre"] = y
                cache[f"{name}.sig"] = s
                return out
            return y

        e1 = conv_act("enc1", z)
        e2 = conv_act("enc2", e1)
        d = _avgpool2(e2)
        m1 = conv_act("mid1", d)
        m2 = conv_act("mid2", m1)
        u = _upsample2(m2)
        cat = np.concatenate([u, e2], axis=0)
        d1 = conv_act("dec1", cat)
        y = conv_act("out", d1, activate=False)
        cache["u_channels"] = u.shape[0]
        return y, cache

    def backward(self, cache, d_out):
        """Gradients of a scalar loss wrt input window and all parameters."""
        p = self.params
        grads = {}

        def conv_back(name, d_y, activated=True):
            if activated:
                d_y = d_y * _silu_grad(cache[f"{name}.pre"], cache[f"{name}.sig"])
            dx, dw, db = _conv_backward(d_y, cache[f"{name}.cols"], p[f"{name}.w"],
                                        cache[f"{name}.xshape"])
            grads[f"{name}.w"] = dw
            grads[f"{name}.b"] = db
            return dx

        d_d1 = conv_back("out", d_out, activated=False)
        d_cat = conv_back("dec1", d_d1)
        cu = cache["u_channels"]
        d_u, d_e2_skip = d_cat[:cu], d_cat[cu:]
        d_m2 = _upsample2_backward(d_u)
        d_m1 = conv_back("mid2", d_m2)
        d_d = conv_back("mid1", d_m1)
        d_e2 = _avgpool2_backward(d_d) + d_e2_skip
        d_e1 = conv_back("enc2", d_e2)
        d_z = conv_back("enc1", d_e1)
        return d_z[:self.window_channels], grads

    def score_window(self, x, tau) -> np.ndarray:
        y, _ = self.forward_cached(x, tau)
        return y

    def score_windows(self, xs, tau) -> np.ndarray:
        """Batched evaluation as a pure map over the leading axis."""
        xs = np.asarray(xs, dtype=self.dtype)
        if xs.ndim != 4:
            raise ShapeError(f"batch must be (N, C, H, W), got ndim={xs.ndim}")
        return np.stack([self.score_window(xs[i], tau) for i in range(xs.shape[0])])


@dataclass(frozen=True)
class Checkpoint:
    """Trained network plus everything needed to rebuild and apply it."""

    schedule_kind: str
    k: int
    v: int
    hidden: int
    params: dict
    step: int
    stats: NormStats
    var_names: tuple[str, ...] = ()
    dt_hours: float = 1.0

    def network(self, dtype=np.float32) -> ScoreNetwork:
        return ScoreNetwork(self.k, self.v, self.hidden,
                            params={n: p.copy() for n, p in self.params.items()}, dtype=dtype)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    """SDCK1 layout: header line, one manifest line per array, float32 payload."""
    arrays = [("norm.mean", np.asarray(ckpt.stats.mean, dtype="<f4")),
              ("norm.std", np.asarray(ckpt.stats.std, dtype="<f4"))]
    for name in sorted(ckpt.params):
        arrays.append((name, np.ascontiguousarray(ckpt.params[name], dtype="<f4")))
    header = (
        f"magic={MAGIC_CHECKPOINT} schedule={ckpt.schedule_kind} k={ckpt.k} v={ckpt.v} "
        f"hidden={ckpt.hidden} step={ckpt.step} vars={','.join(ckpt.var_names)} "
        f"dt_hours={ckpt.dt_hours!r} arrays={len(arrays)}\n"
    )
    manifest = []
    offset = 0
    for name, arr in arrays:
        shape = ",".join(str(d) for d in arr.shape)
        manifest.append(f"{name} {offset} {shape}\n")
        offset += arr.nbytes
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("utf-8"))
            fh.writelines(m.encode("utf-8") for m in manifest)
            for _, arr in arrays:
                fh.write(arr.tobytes())
    except OSError as exc:
        raise WriteError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            head = fh.readline(65536)
            if not head.endswith(b"\n"):
                raise FormatError("missing checkpoint header")
            pairs = parse_header(head)
            if pairs.get("magic") != MAGIC_CHECKPOINT:
                raise FormatError(f"bad magic {pairs.get('magic')!r}")
            n_arrays = int(pairs["arrays"])
            manifest = []
            for _ in range(n_arrays):
                line = fh.readline(65536).decode("utf-8").rstrip("\n")
                name, offset, shape = line.split(" ")
                manifest.append((name, int(offset),
                                 tuple(int(d) for d in shape.split(","))))
            payload = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    arrays = {}
    for name, offset, shape in manifest:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape)
    stats = NormStats(arrays.pop("norm.mean").astype(np.float64),
                      arrays.pop("norm.std").astype(np.float64))
    var_names = tuple(s for s in pairs.get("vars", "").split(",") if s)
    return Checkpoint(
        schedule_kind=pairs["schedule"], k=int(pairs["k"]), v=int(pairs["v"]),
        hidden=int(pairs["hidden"]), params=arrays, step=int(pairs["step"]),
        stats=stats, var_names=var_names, dt_hours=float(pairs.get("dt_hours", 1.0)),
    )


def checkpoint_digest(path: str | os.PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass(frozen=True)
class TrainConfig:
    k: int = 1
    epochs: int = 4
    batch: int = 8
    lr: float = 1e-3
    seed: int = 0
    hidden: int = 24


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(p) for n, p in params.items()}
        self.v = {n: np.zeros_like(p) for n, p in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            params[name] -= (scale * m / (np.sqrt(v) + self.eps)).astype(params[name].dtype)


def steps_per_epoch(n_frames: int, w: int, batch: int) -> int:
    return max(1, (n_frames - w + 1) // batch)


def train(data: TrajectoryTensor, cfg: TrainConfig, start: Checkpoint | None = None,
          on_step=None, schedule=DEFAULT_SCHEDULE) -> Checkpoint:
    """Train a score network on a trajectory by denoising score matching.

    Windows of w = 2k+1 frames are drawn with uniformly random start index;
    per-variable standardization is fitted on ``data`` (or reused from a
    resumed checkpoint) and stored in the returned checkpoint. Each step's
    randomness derives from (seed, global step), so a resumed run replays
    exactly the steps a longer fresh run would have taken.
    """
    w = 2 * cfg.k + 1
    l, v = data.dims[0], data.dims[1]
    if l < w:
        raise DataError(f"need at least w={w} frames to form one window, got L={l}")
    if start is not None:
        if (start.k, start.v, start.hidden) != (cfg.k, v, cfg.hidden):
            raise ShapeError("resume checkpoint architecture does not match config")
        stats = start.stats
        net = start.network()
        step0 = start.step
    else:
        stats = NormStats.from_trajectory(data)
        net = ScoreNetwork(cfg.k, v, cfg.hidden,
                           rng=np.random.default_rng([cfg.seed, 0xC0FFEE]))
        step0 = 0
    norm = ((data.data.astype(np.float64) - stats.mean[None, :, None, None])
            / stats.std[None, :, None, None]).astype(np.float32)

    opt = _Adam(net.params, cfg.lr)
    opt.t = step0
    n_steps = cfg.epochs * steps_per_epoch(l, w, cfg.batch)
    for local in range(n_steps):
        step = step0 + local
        rng = np.random.default_rng([cfg.seed, step])
        starts = rng.integers(0, l - w + 1, size=cfg.batch)
        taus = rng.uniform(TAU_TRAIN_MIN, 1.0, size=cfg.batch)
        windows = np.stack([norm[s:s + w] for s in starts])
        noises = rng.standard_normal(windows.shape).astype(np.float32)
        loss, grads = dsm_loss(net, windows, taus, noises, schedule)
        opt.step(net.params, grads)
        if on_step is not None:
            on_step(step, loss)
    return Checkpoint(
        schedule_kind=schedule.kind, k=cfg.k, v=v, hidden=cfg.hidden,
        params={n: p.copy() for n, p in net.params.items()}, step=step0 + n_steps,
        stats=stats, var_names=data.var_names, dt_hours=data.dt_hours,
    )
