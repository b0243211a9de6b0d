import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from diffusion import (NoisyState, build_schedule, forward_diffuse, guided_sample,
                       posterior_coefficients, reverse_step, schedule_from_spec, strided_timesteps)


@pytest.fixture
def sched():
    return build_schedule(T=50)


def test_schedule_is_monotone(sched):
    ab = sched.alpha_bar(np.arange(0, 51))
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert np.all((ab > 0) & (ab <= 1))
    assert schedule_from_spec(sched.spec()).alpha_bars.tolist() == sched.alpha_bars.tolist()


@pytest.mark.parametrize("kwargs", [{"T": 0}, {"beta_start": 0.0}, {"beta_start": 0.5, "beta_end": 0.1},
                                    {"shape": "cosine"}])
def test_bad_schedules(kwargs):
    with pytest.raises(ValueError):
        build_schedule(**kwargs)


@pytest.mark.parametrize("t", [1, 25, 50])
def test_forward_moments(sched, t):
    rng = np.random.default_rng(t)
    n = 100_000
    x0 = np.full((n, 1), 1.5)
    state = forward_diffuse(x0, t, rng.standard_normal((n, 1)), sched)
    ab = sched.alpha_bar(t)
    assert state.x_t.mean() == pytest.approx(np.sqrt(ab) * 1.5, rel=0.05, abs=0.01)
    assert state.x_t.var() == pytest.approx(1.0 - ab, rel=0.05, abs=1e-4)


def test_forward_accepts_per_row_timesteps(sched):
    x0 = np.ones((3, 2))
    eps = np.zeros((3, 2))
    state = forward_diffuse(x0, np.array([1, 10, 50]), eps, sched)
    assert_allclose(state.x_t[:, 0], np.sqrt(sched.alpha_bar(np.array([1, 10, 50]))))


@pytest.mark.parametrize("t", [0, 51])
def test_forward_rejects_out_of_range_t(sched, t):
    with pytest.raises(ValueError, match="out of range"):
        forward_diffuse(np.zeros(2), t, np.zeros(2), sched)


@pytest.mark.parametrize("t", [2, 7, 30, 50])
def test_reverse_step_is_the_gaussian_posterior(sched, t):
    x0, x_t = 0.7, -1.3
    ab_prev = sched.alpha_bar(t - 1)
    alpha, beta = sched.alphas[t - 1], sched.betas[t - 1]
    precision = 1.0 / (1.0 - ab_prev) + alpha / beta
    variance = 1.0 / precision
    mean = variance * (np.sqrt(ab_prev) * x0 / (1.0 - ab_prev) + np.sqrt(alpha) * x_t / beta)

    state = NoisyState(np.array([x_t]), t, None)
    got_mean = reverse_step(state, np.array([x0]), sched, np.zeros(1))
    got_shifted = reverse_step(state, np.array([x0]), sched, np.ones(1))
    assert got_mean[0] == pytest.approx(mean, abs=1e-10)
    assert got_shifted[0] - got_mean[0] == pytest.approx(np.sqrt(variance), abs=1e-10)
    assert posterior_coefficients(sched, t)[2] == pytest.approx(variance, abs=1e-12)


def test_last_step_returns_estimate_exactly(sched):
    x0_hat = np.array([0.25, -3.0, 8.0])
    state = NoisyState(np.array([5.0, 1.0, -2.0]), 1, None)
    assert_array_equal(reverse_step(state, x0_hat, sched, np.full(3, 9.0)), x0_hat)


def test_reverse_step_rejects_non_finite(sched):
    state = NoisyState(np.array([np.nan]), 3, None)
    with pytest.raises(ValueError, match="non-finite x_t"):
        reverse_step(state, np.zeros(1), sched, np.zeros(1))


def test_strided_timesteps():
    assert strided_timesteps(50, 50) == list(range(50, 0, -1))
    assert strided_timesteps(50, 1) == [50]
    steps = strided_timesteps(50, 5)
    assert len(steps) == 5
    assert steps[0] == 50 and steps[-1] == 1
    assert steps == sorted(steps, reverse=True)
    for bad in (0, 51):
        with pytest.raises(ValueError):
            strided_timesteps(50, bad)


def test_single_step_sampling_returns_first_estimate(sched):
    g_d = np.arange(6, dtype=float).reshape(2, 3)
    out = guided_sample(g_d, lambda x_t, g, t: g, sched, rng_seed=0, n_steps=1, shape=(2, 3))
    assert_array_equal(out, g_d)


def test_per_row_seeds_make_rows_batch_independent(sched):
    def denoiser(x_t, g, t):
        return g + 0.1 * x_t

    g_d = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    both = guided_sample(g_d, denoiser, sched, [[0, 5, 10], [0, 5, 11]], n_steps=50, shape=(2, 3))
    alone = guided_sample(g_d[1:], denoiser, sched, [[0, 5, 11]], n_steps=50, shape=(1, 3))
    assert_array_equal(both[1], alone[0])
    again = guided_sample(g_d, denoiser, sched, [[0, 5, 10], [0, 5, 11]], n_steps=50, shape=(2, 3))
    assert_array_equal(both, again)


def test_seed_count_must_match_rows(sched):
    with pytest.raises(ValueError, match="2 seeds for 3 rows"):
        guided_sample(np.zeros((3, 2)), lambda x, g, t: g, sched, [[1], [2]], n_steps=2, shape=(3, 2))


def test_alpha_bars_match_a_log_space_product():
    sched = build_schedule(T=50)
    betas = np.array([1e-4 + (0.02 - 1e-4) * (t - 1) / 49 for t in range(1, 51)])
    assert_allclose(sched.betas, betas, rtol=0, atol=1e-15)
    assert_allclose(sched.alpha_bars, np.exp(np.cumsum(np.log1p(-betas))), rtol=1e-12, atol=0)


def test_forward_diffusion_is_linear_in_signal_and_noise(sched):
    rng = np.random.default_rng(3)
    x0, x0_other = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    eps, eps_other = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    t = np.array([1, 7, 20, 33, 50])
    a, b = 1.7, -0.4
    mixed = forward_diffuse(a * x0 + b * x0_other, t, a * eps + b * eps_other, sched).x_t
    parts = a * forward_diffuse(x0, t, eps, sched).x_t + b * forward_diffuse(x0_other, t, eps_other, sched).x_t
    assert_allclose(mixed, parts, atol=1e-12)


def test_constant_estimate_pulls_the_chain_onto_it(sched):
    target = np.array([0.5, -1.0])
    n = 4000
    seen = {}

    def denoiser(x_t, g, t):
        seen[t] = x_t.copy()
        return np.tile(target, (n, 1))

    out = guided_sample(None, denoiser, sched, rng_seed=4, n_steps=sched.T, shape=(n, 2))
    assert_allclose(out, np.tile(target, (n, 1)), atol=1e-12)

    # mean of the chain follows the noiseless posterior recursion from a zero start
    mean = np.zeros(2)
    for t in range(sched.T, 0, -1):
        assert_allclose(seen[t].mean(axis=0), mean, atol=0.08)
        coef_x0, coef_xt, _ = posterior_coefficients(sched, t)
        mean = coef_x0 * target + coef_xt * mean
    assert_allclose(mean, target, atol=1e-6)
    final = reverse_step(NoisyState(seen[1], 1, None), out, sched, np.zeros((n, 2)))
    assert_allclose(final, out, atol=1e-6)


def test_reverse_chain_distance_to_the_estimate_shrinks(sched):
    rng = np.random.default_rng(5)
    target = np.array([0.5, -1.0])
    x_t = rng.standard_normal((50_000, 2))
    distances = [np.mean(np.sum((x_t - target) ** 2, axis=1))]
    for t in range(sched.T, 0, -1):
        x_t = reverse_step(NoisyState(x_t, t, None), target, sched, rng.standard_normal(x_t.shape))
        distances.append(np.mean(np.sum((x_t - target) ** 2, axis=1)))
    assert all(b < a for a, b in zip(distances, distances[1:]))
    assert distances[-1] == pytest.approx(0.0, abs=1e-20)
