"""Assemble the score of an arbitrary-length trajectory from windowed
evaluations of the trained model.

Each frame's score comes from a window of w = 2k+1 consecutive frames: the
leading k+1 frames from the first window, every interior frame from the
center slot of the window around it, and the trailing k+1 frames from the
last window. Windows are evaluated in bounded batches; the result is
independent of the batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class ComposeConfig:
    k: int = 1
    batch_windows: int = 8

    def __post_init__(self):
        if self.batch_windows < 1:
            raise ValueError("batch_windows must be >= 1")


@dataclass(frozen=True)
class WindowEntry:
    """One window of the covering plan, all indices 1-based inclusive."""

    window_start: int
    slot_range: tuple[int, int]
    target_range: tuple[int, int]


def window_plan(l: int, k: int) -> list[WindowEntry]:
    """Covering plan whose target ranges partition 1..L.

    Interior windows contribute exactly their center slot; the first and
    last windows contribute their leading / trailing k+1 slots.
    """
    w = 2 * k + 1
    if l < w:
        raise ShapeError(f"need L >= 2k+1 = {w}, got L={l}")
    if l == w:
        return [WindowEntry(1, (1, w), (1, w))]
    plan = [WindowEntry(1, (1, k + 1), (1, k + 1))]
    for t in range(k + 2, l - k):
        plan.append(WindowEntry(t - k, (k + 1, k + 1), (t, t)))
    plan.append(WindowEntry(l - 2 * k, (k + 1, w), (l - k, l)))
    return plan


def compose_score(net, x_tau: np.ndarray, tau: float, cfg: ComposeConfig) -> np.ndarray:
    """Score of the full (L, V, H, W) trajectory via the window plan.

    At most ``cfg.batch_windows`` window activations are alive at a time.
    """
    x_tau = np.asarray(x_tau)
    if x_tau.ndim != 4:
        raise ShapeError(f"trajectory must be (L, V, H, W), got ndim={x_tau.ndim}")
    l, v, h, ww = x_tau.shape
    k = cfg.k
    w = 2 * k + 1
    plan = window_plan(l, k)
    out = np.empty_like(x_tau, dtype=net.dtype)
    for chunk_start in range(0, len(plan), cfg.batch_windows):
        chunk = plan[chunk_start:chunk_start + cfg.batch_windows]
        xs = np.stack([
            x_tau[e.window_start - 1:e.window_start - 1 + w].reshape(w * v, h, ww)
            for e in chunk
        ])
        ys = net.score_windows(xs, tau)
        for entry, y in zip(chunk, ys):
            lo, hi = entry.slot_range
            t0, t1 = entry.target_range
            out[t0 - 1:t1] = y.reshape(w, v, h, ww)[lo - 1:hi]
    return out
