import numpy as np
import pytest

from sda.errors import ShapeError
from sda.nets import ScoreNetwork
from sda.sequence import ComposeConfig, compose_score, window_plan


def naive_compose(net, x_tau, tau, k):
    """Literal per-window transcription of the published composition loop."""
    l, v, h, w = x_tau.shape
    ww = 2 * k + 1

    def win(start):  # start is 1-based
        return x_tau[start - 1:start - 1 + ww].reshape(ww * v, h, w)

    def frames(y):
        return y.reshape(ww, v, h, w)

    s = np.empty_like(x_tau, dtype=net.dtype)
    s[0:k + 1] = frames(net.score_window(win(1), tau))[0:k + 1]
    for t in range(k + 2, l - k):
        s[t - 1] = frames(net.score_window(win(t - k), tau))[k]
    s[l - k - 1:l] = frames(net.score_window(win(l - 2 * k), tau))[k:]
    return s


def random_net(k, v, seed):
    net = ScoreNetwork(k=k, v=v, hidden=2, rng=np.random.default_rng(seed))
    net.params["out.w"] = (np.random.default_rng(seed + 1)
                           .standard_normal(net.params["out.w"].shape)
                           .astype(np.float32) * 0.1)
    return net


def test_plan_single_window():
    plan = window_plan(3, 1)
    assert len(plan) == 1
    assert plan[0].window_start == 1
    assert plan[0].slot_range == (1, 3)
    assert plan[0].target_range == (1, 3)


def test_plan_l5_k1_hand_enumerated():
    plan = window_plan(5, 1)
    assert [e.window_start for e in plan] == [1, 2, 3]
    assert [e.target_range for e in plan] == [(1, 2), (3, 3), (4, 5)]
    assert [e.slot_range for e in plan] == [(1, 2), (2, 2), (2, 3)]


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_plan_targets_partition(k):
    for l in range(2 * k + 1, 65):
        plan = window_plan(l, k)
        covered = []
        w = 2 * k + 1
        for e in plan:
            lo, hi = e.target_range
            slo, shi = e.slot_range
            assert 1 <= e.window_start <= l - w + 1
            assert hi - lo == shi - slo
            # slots map to the same absolute frames as the targets
            assert e.window_start + slo - 1 == lo
            covered.extend(range(lo, hi + 1))
        assert covered == list(range(1, l + 1))


def test_plan_rejects_short_sequences():
    with pytest.raises(ShapeError):
        window_plan(2, 1)


def test_single_window_equals_direct_call():
    net = random_net(1, 2, 10)
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)
    out = compose_score(net, x, 0.5, ComposeConfig(k=1, batch_windows=4))
    direct = net.score_window(x.reshape(6, 4, 4), 0.5).reshape(3, 2, 4, 4)
    assert out.tobytes() == direct.tobytes()


def test_batch_windows_invariance():
    net = random_net(1, 1, 12)
    rng = np.random.default_rng(13)
    x = rng.standard_normal((11, 1, 4, 4)).astype(np.float32)
    outs = [compose_score(net, x, 0.3, ComposeConfig(k=1, batch_windows=b)).tobytes()
            for b in (1, 7, 11)]
    assert outs[0] == outs[1] == outs[2]


@pytest.mark.parametrize("k", [1, 2, 3])
def test_oracle_equivalence_bitwise(k):
    rng = np.random.default_rng(100 + k)
    for trial in range(3):
        net = random_net(k, 1, 200 + 10 * k + trial)
        for l in range(2 * k + 1, 41, 3):
            x = rng.standard_normal((l, 1, 4, 4)).astype(np.float32)
            got = compose_score(net, x, 0.4, ComposeConfig(k=k, batch_windows=5))
            want = naive_compose(net, x, 0.4, k)
            assert got.tobytes() == want.tobytes(), (k, l, trial)


def test_memory_bound_on_live_windows():
    calls = []

    class Recorder(ScoreNetwork):
        def score_windows(self, xs, tau):
            calls.append(xs.shape[0])
            return super().score_windows(xs, tau)

    net = Recorder(k=1, v=1, hidden=2, rng=np.random.default_rng(14))
    x = np.random.default_rng(15).standard_normal((20, 1, 4, 4)).astype(np.float32)
    compose_score(net, x, 0.5, ComposeConfig(k=1, batch_windows=3))
    assert max(calls) <= 3
    assert sum(calls) == len(window_plan(20, 1))


def test_locality_of_frame_perturbation():
    # changing frame t may move output frames only within [t-2k, t+2k]
    k = 1
    net = random_net(k, 1, 16)
    rng = np.random.default_rng(17)
    x = rng.standard_normal((12, 1, 4, 4)).astype(np.float32)
    base = compose_score(net, x, 0.5, ComposeConfig(k=k))
    t = 6  # 0-based
    bumped = x.copy()
    bumped[t] += 1.0
    out = compose_score(net, bumped, 0.5, ComposeConfig(k=k))
    changed = np.flatnonzero(np.any(out != base, axis=(1, 2, 3)))
    assert changed.size > 0
    assert changed.min() >= t - 2 * k
    assert changed.max() <= t + 2 * k


def test_compose_rejects_short_sequences():
    net = random_net(2, 1, 18)
    x = np.zeros((4, 1, 4, 4), dtype=np.float32)
    with pytest.raises(ShapeError):
        compose_score(net, x, 0.5, ComposeConfig(k=2))
