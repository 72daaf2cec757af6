import numpy as np
import pytest

from sda.errors import ShapeError
from sda.fields import NormStats, TrajectoryTensor, VariableMask
from sda.observation import (CoarseObservation, ObservationSpec, apply_operator, coarsen,
                             information_ratio, log_likelihood_grad_wrt_xhat,
                             normalize_observation, observed_shape, read_observation,
                             write_observation)


def spec_for(v, block=2, stride=2, noise=0.5, mask=None, phase=0):
    return ObservationSpec(block=block, stride_t=stride,
                           noise_std=np.full(v, noise),
                           mask=mask or VariableMask.all_true(v), phase=phase)


def traj(rng, dims):
    return TrajectoryTensor(rng.standard_normal(dims).astype(np.float32),
                            tuple(f"v{i}" for i in range(dims[1])), 1.0)


def test_constant_field_coarsens_to_constant():
    x = TrajectoryTensor(np.full((6, 1, 8, 8), 2.5, dtype=np.float32), ("a",), 1.0)
    y = coarsen(x, spec_for(1, block=4, stride=3))
    assert y.data.shape == (2, 1, 2, 2)
    np.testing.assert_allclose(y.data, 2.5, rtol=1e-6)


def test_paper_shaped_grid_factors():
    spec = spec_for(4, block=16, stride=6)
    assert observed_shape(spec, (12, 4, 128, 128)) == (2, 4, 8, 8)
    assert information_ratio(spec) == 1536


def test_block_mean_matches_brute_force():
    rng = np.random.default_rng(0)
    x = traj(rng, (1, 1, 4, 4))
    y = coarsen(x, spec_for(1, block=2, stride=1))
    for i in range(2):
        for j in range(2):
            want = x.data[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].astype(np.float64).mean()
            assert y.data[0, 0, i, j] == pytest.approx(want, rel=1e-6)


def test_coarsen_divisibility_checked():
    rng = np.random.default_rng(1)
    with pytest.raises(ShapeError):
        coarsen(traj(rng, (2, 1, 6, 6)), spec_for(1, block=4, stride=1))


def test_coarsen_is_linear():
    rng = np.random.default_rng(2)
    spec = spec_for(2, block=2, stride=2)
    x = rng.standard_normal((5, 2, 4, 4))
    z = rng.standard_normal((5, 2, 4, 4))
    a, b = 1.7, -0.4
    left = apply_operator(a * x + b * z, spec)
    right = a * apply_operator(x, spec) + b * apply_operator(z, spec)
    np.testing.assert_allclose(left, right, atol=1e-12)


def test_block_mean_between_min_and_max():
    rng = np.random.default_rng(3)
    x = traj(rng, (4, 2, 8, 8))
    spec = spec_for(2, block=4, stride=1)
    y = coarsen(x, spec)
    blocks = x.data.reshape(4, 2, 2, 4, 2, 4)
    np.testing.assert_array_compare(
        lambda a, b: a <= b + 1e-6, y.data,
        blocks.max(axis=(3, 5)))
    np.testing.assert_array_compare(
        lambda a, b: a >= b - 1e-6, y.data,
        blocks.min(axis=(3, 5)))


def test_masked_variables_dropped():
    rng = np.random.default_rng(4)
    x = traj(rng, (4, 3, 4, 4))
    spec = spec_for(3, block=2, stride=2, mask=VariableMask((True, False, True)))
    y = coarsen(x, spec)
    assert y.data.shape[1] == 2
    full = coarsen(x, spec_for(3, block=2, stride=2))
    np.testing.assert_array_equal(y.data[:, 0], full.data[:, 0])
    np.testing.assert_array_equal(y.data[:, 1], full.data[:, 2])


def test_phase_shifts_observed_frames():
    rng = np.random.default_rng(5)
    x = traj(rng, (7, 1, 2, 2))
    y = coarsen(x, spec_for(1, block=1, stride=3, phase=1))
    np.testing.assert_array_equal(
        y.data[:, 0, :, :], x.data[[1, 4], 0])


def test_zero_residual_zero_gradient():
    # quarter-integer values make block means exact in float32
    rng = np.random.default_rng(6)
    vals = rng.integers(-8, 8, size=(4, 1, 4, 4)).astype(np.float32) / 4.0
    x = TrajectoryTensor(vals, ("a",), 1.0)
    spec = spec_for(1, block=2, stride=2)
    y = coarsen(x, spec)
    grad = log_likelihood_grad_wrt_xhat(y, x.data.astype(np.float64))
    np.testing.assert_array_equal(grad, 0.0)


def test_identity_operator_gradient():
    # b=1, s=1: gradient is residual / noise_std^2 at each observed cell
    x = TrajectoryTensor(np.zeros((1, 1, 2, 2), dtype=np.float32), ("a",), 1.0)
    spec = spec_for(1, block=1, stride=1, noise=0.5)
    y = CoarseObservation(np.full((1, 1, 2, 2), 2.0, dtype=np.float32), spec, 1)
    grad = log_likelihood_grad_wrt_xhat(y, x.data.astype(np.float64))
    np.testing.assert_allclose(grad, 2.0 / 0.25)


def test_gradient_zero_on_unobserved_frames_and_masked_vars():
    rng = np.random.default_rng(7)
    spec = spec_for(2, block=2, stride=2, mask=VariableMask((True, False)))
    x = traj(rng, (5, 2, 4, 4))
    y = coarsen(x, spec)
    grad = log_likelihood_grad_wrt_xhat(y, rng.standard_normal((5, 2, 4, 4)))
    assert np.all(grad[1::2] == 0.0)     # unobserved frames
    assert np.all(grad[:, 1] == 0.0)     # masked variable
    assert np.any(grad[::2, 0] != 0.0)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    spec = spec_for(2, block=2, stride=2, noise=0.7)
    xhat = rng.standard_normal((3, 2, 4, 4))
    y = CoarseObservation(
        rng.standard_normal(observed_shape(spec, xhat.shape)).astype(np.float32),
        spec, 3)

    def log_density(arr):
        resid = y.data.astype(np.float64) - apply_operator(arr, spec)
        weights = spec.noise_std[spec.mask.indices] ** 2
        return -0.5 * float((resid ** 2 / weights[None, :, None, None]).sum())

    grad = log_likelihood_grad_wrt_xhat(y, xhat)
    step = 1e-6
    fd = np.zeros_like(xhat)
    flat_x = xhat.reshape(-1)
    flat_fd = fd.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + step
        lp = log_density(xhat)
        flat_x[i] = orig - step
        lm = log_density(xhat)
        flat_x[i] = orig
        flat_fd[i] = (lp - lm) / (2 * step)
    denom = max(np.linalg.norm(fd), np.linalg.norm(grad))
    assert np.linalg.norm(grad - fd) / denom < 1e-6


def test_observation_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    x = traj(rng, (6, 2, 4, 4))
    spec = spec_for(2, block=2, stride=3, noise=0.3, phase=1)
    y = coarsen(x, spec)
    path = tmp_path / "obs.sdat"
    write_observation(path, y, ("v0", "v1"), 1.0)
    back, names, dt = read_observation(path)
    assert back.data.tobytes() == y.data.tobytes()
    assert back.spec.block == spec.block
    assert back.spec.stride_t == spec.stride_t
    assert back.spec.phase == spec.phase
    assert back.spec.mask.included == spec.mask.included
    np.testing.assert_allclose(back.spec.noise_std, spec.noise_std)
    assert back.origin_l == 6
    assert names == ("v0", "v1")
    assert dt == pytest.approx(1.0)


def test_normalize_observation_commutes_with_coarsening():
    rng = np.random.default_rng(10)
    x = traj(rng, (4, 2, 4, 4))
    spec = spec_for(2, block=2, stride=2, noise=0.4)
    stats = NormStats(np.array([1.0, -2.0]), np.array([2.0, 0.5]))
    y = coarsen(x, spec)
    y_norm = normalize_observation(y, stats)
    from sda.fields import normalize
    y_of_norm = coarsen(normalize(x, stats), spec)
    np.testing.assert_allclose(y_norm.data, y_of_norm.data, atol=1e-5)
    np.testing.assert_allclose(y_norm.spec.noise_std, [0.2, 0.8])
