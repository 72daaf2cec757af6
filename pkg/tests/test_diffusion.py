import numpy as np
import pytest

from sda.diffusion import DEFAULT_SCHEDULE, VpCosineSchedule, dsm_loss, perturb
from sda.errors import DomainError, ShapeError
from sda.nets import ScoreNetwork


def test_schedule_endpoints():
    sch = DEFAULT_SCHEDULE
    assert sch.alpha(0.0) == pytest.approx(1.0, abs=1e-12)
    assert sch.sigma(0.0) == pytest.approx(0.0, abs=1e-12)
    assert sch.alpha(1.0) <= 1e-3


def test_variance_preservation_on_grid():
    sch = DEFAULT_SCHEDULE
    taus = np.linspace(0.0, 1.0, 1000)
    total = sch.alpha(taus) ** 2 + sch.sigma(taus) ** 2
    np.testing.assert_allclose(total, 1.0, atol=1e-12)


def test_schedule_monotone_on_grid():
    sch = DEFAULT_SCHEDULE
    taus = np.linspace(0.0, 1.0, 1000)
    a = sch.alpha(taus)
    s = sch.sigma(taus)
    assert np.all(np.diff(a) < 0)
    assert np.all(np.diff(s) > 0)


def test_beta_matches_log_derivative():
    sch = DEFAULT_SCHEDULE
    taus = np.linspace(0.05, 0.95, 37)
    eps = 1e-7
    fd = -2.0 * (np.log(sch.alpha(taus + eps)) - np.log(sch.alpha(taus - eps))) / (2 * eps)
    np.testing.assert_allclose(sch.beta(taus), fd, rtol=1e-5)


def test_perturb_tau_zero_identity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    noise = rng.standard_normal(x.shape).astype(np.float32)
    np.testing.assert_array_equal(perturb(x, 0.0, noise), x)


def test_perturb_tau_one_standard_normal():
    # Monte Carlo: at tau=1 the output should be N(0, 1) regardless of x0.
    rng = np.random.default_rng(1)
    x = np.full((10_000,), 7.3)
    noise = rng.standard_normal(x.shape)
    out = perturb(x, 1.0, noise)
    assert abs(out.mean()) < 0.05
    assert 0.9 < out.var() < 1.1


def test_perturb_mid_tau_moments():
    # Sample variance over noise draws equals alpha^2 x0^2 spread + sigma^2 per cell.
    sch = DEFAULT_SCHEDULE
    rng = np.random.default_rng(2)
    x0 = np.array([0.0, 1.0, -2.0])
    n = 10_000
    draws = np.stack([perturb(x0, 0.5, rng.standard_normal(3)) for _ in range(n)])
    a, s = float(sch.alpha(0.5)), float(sch.sigma(0.5))
    expect_mean = a * x0
    se_mean = s / np.sqrt(n)
    assert np.all(np.abs(draws.mean(axis=0) - expect_mean) < 3 * se_mean)
    expect_var = s * s
    se_var = expect_var * np.sqrt(2.0 / n)
    assert np.all(np.abs(draws.var(axis=0) - expect_var) < 3 * se_var)


def test_perturb_domain_and_shape_errors():
    x = np.zeros((2, 2))
    with pytest.raises(DomainError):
        perturb(x, 1.5, np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        perturb(x, 0.5, np.zeros((3, 2)))


def test_dsm_loss_zero_net_on_zero_data():
    # Zero network, zero data: loss = mean sigma^2 ||eps/sigma||^2 = E||eps||^2,
    # which concentrates at the window dimensionality.
    net = ScoreNetwork(k=1, v=1, hidden=2, rng=np.random.default_rng(0))
    for name in net.params:          # zero everything, not just the last layer
        net.params[name][:] = 0.0
    rng = np.random.default_rng(3)
    b, dims = 64, 3 * 1 * 4 * 4
    windows = np.zeros((b, 3, 1, 4, 4), dtype=np.float32)
    noises = rng.standard_normal(windows.shape).astype(np.float32)
    taus = np.full(b, 0.83)  # near-unit sigma
    loss, _ = dsm_loss(net, windows, taus, noises)
    assert abs(loss - dims) < 4 * dims * np.sqrt(2.0 / (b * dims))


def test_dsm_loss_window_length_checked():
    net = ScoreNetwork(k=1, v=1, hidden=2)
    with pytest.raises(ShapeError):
        dsm_loss(net, np.zeros((1, 5, 1, 4, 4)), np.array([0.5]),
                 np.zeros((1, 5, 1, 4, 4)))


def test_dsm_gradient_matches_finite_differences():
    # Exhaustive central-difference check on a small float64 net.
    net = ScoreNetwork(k=1, v=1, hidden=2, dtype=np.float64,
                       rng=np.random.default_rng(7))
    net.params["out.w"] = np.random.default_rng(8).standard_normal(
        net.params["out.w"].shape) * 0.2
    rng = np.random.default_rng(9)
    windows = rng.standard_normal((2, 3, 1, 4, 4))
    noises = rng.standard_normal(windows.shape)
    taus = np.array([0.35, 0.8])
    _, grads = dsm_loss(net, windows, taus, noises)
    step = 1e-4
    for name, p in net.params.items():
        flat = p.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = dsm_loss(net, windows, taus, noises)
            flat[i] = orig - step
            lm, _ = dsm_loss(net, windows, taus, noises)
            flat[i] = orig
            fd[i] = (lp - lm) / (2 * step)
        fd = fd.reshape(p.shape)
        denom = max(np.linalg.norm(fd), np.linalg.norm(grads[name]), 1e-12)
        assert np.linalg.norm(grads[name] - fd) / denom < 1e-4, name


def test_dsm_loss_analytic_minimum_for_gaussian_score():
    # For x0 ~ N(mu, s0^2) iid cells the optimal score is
    # (alpha mu - x)/m^2 with m^2 = alpha^2 s0^2 + sigma^2. Substituting
    # x = alpha x0 + sigma eps gives a weighted residual with per-cell
    # expectation alpha^2 s0^2 / m^2, so E loss = dims * alpha^2 s0^2 / m^2.
    sch = VpCosineSchedule()
    mu, s0, tau = 0.4, 1.3, 0.6
    a, s = float(sch.alpha(tau)), float(sch.sigma(tau))
    m2 = a * a * s0 * s0 + s * s

    class ExactScore:
        window_frames = 3
        params = {}

        def forward_cached(self, x, _tau):
            return (a * mu - x) / m2, None

        def backward(self, cache, d_out):
            return None, {}

    rng = np.random.default_rng(10)
    b, shape = 400, (3, 1, 4, 4)
    dims = int(np.prod(shape))
    windows = mu + s0 * rng.standard_normal((b, *shape))
    noises = rng.standard_normal(windows.shape)
    loss, _ = dsm_loss(ExactScore(), windows, np.full(b, tau), noises, sch)
    expect = dims * (a * a * s0 * s0) / m2
    # the optimum is a statistical floor; allow generous Monte Carlo slack
    assert abs(loss - expect) / expect < 0.1
