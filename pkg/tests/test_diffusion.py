import math

import numpy as np
import pytest

from agriradar.diffusion import (
    ConsistencyModel,
    DiffusionError,
    DistillConfig,
    DivergenceError,
    EvaluationCounter,
    NoiseSchedule,
    consistency_distill,
    consistency_sample,
    consistency_scalings,
    denoise,
    edm_loss,
    gaussian_oracle_denoiser,
    heun_sample,
    heun_step,
    loss_weight,
    perturb,
    preconditioning,
    sample_training_sigma,
    step_schedule,
)
from agriradar.models.stage2 import ResidualDenoiser, Stage2ModelConfig
from agriradar.optim import OptimizerConfig


class ZeroNetwork:
    """Raw network that always outputs zero."""

    sigma_data = 0.5

    def evaluate(self, x_in, sigma, condition=None):
        return np.zeros_like(x_in)


class NanNetwork:
    sigma_data = 0.5
    params: dict = {}

    def evaluate(self, x_in, sigma, condition=None):
        return np.full_like(x_in, np.nan)

    def forward(self, x_in, sigma, condition=None):
        return self.evaluate(x_in, sigma, condition), None

    def backward(self, cache, grad_out):
        return {}

    def copy(self):
        return self


class CountingNetwork(ZeroNetwork):
    def __init__(self):
        self.count = 0

    def evaluate(self, x_in, sigma, condition=None):
        self.count += 1
        return super().evaluate(x_in, sigma, condition)


def _random_network(channels: int, seed: int = 0) -> ResidualDenoiser:
    net = ResidualDenoiser(channels, 0, Stage2ModelConfig(hidden=8), seed=seed)
    rng = np.random.default_rng(seed + 1)
    for name in ("v", "w2", "b2"):
        net.params[name] = 0.3 * rng.standard_normal(net.params[name].shape)
    return net


class TestScalings:
    def test_weight_cancels_output_scale(self):
        sigmas = np.logspace(np.log10(0.002), np.log10(80.0), 100)
        _, c_out, _, _ = preconditioning(sigmas, 0.5)
        np.testing.assert_allclose(loss_weight(sigmas, 0.5) * c_out ** 2, 1.0, rtol=1e-12)

    def test_values_at_sigma_data(self):
        sd = 0.5
        c_skip, c_out, c_in, c_noise = preconditioning(sd, sd)
        assert c_skip == pytest.approx(0.5)
        assert c_out == pytest.approx(sd / math.sqrt(2.0))
        assert c_in == pytest.approx(1.0 / (sd * math.sqrt(2.0)))
        assert c_noise == pytest.approx(0.25 * math.log(sd))

    def test_small_sigma_skips_through(self):
        c_skip, c_out, _, _ = preconditioning(1e-6, 0.5)
        assert c_skip == pytest.approx(1.0)
        assert c_out == pytest.approx(0.0, abs=1e-5)

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_non_positive_sigma(self, sigma):
        with pytest.raises(DiffusionError):
            preconditioning(sigma, 0.5)

    def test_consistency_boundary(self):
        c_skip, c_out, _ = consistency_scalings(0.002, 0.002, 0.5)
        assert c_skip == 1.0
        assert c_out == 0.0
        with pytest.raises(DiffusionError):
            consistency_scalings(0.001, 0.002, 0.5)


class TestNoise:
    def test_fixed_training_sigma(self, rng):
        schedule = NoiseSchedule(p_std=0.0)
        np.testing.assert_allclose(sample_training_sigma(schedule, rng, size=5), math.exp(-1.2))

    def test_training_sigma_is_log_normal(self, rng):
        sigmas = sample_training_sigma(NoiseSchedule(), rng, size=100_000)
        assert np.all(sigmas > 0)
        assert np.log(sigmas).mean() == pytest.approx(-1.2, abs=0.02)
        assert np.log(sigmas).std() == pytest.approx(1.2, abs=0.02)

    def test_perturb_zero_sigma_is_identity(self, rng):
        x = rng.normal(size=(10, 5))
        np.testing.assert_array_equal(perturb(x, 0.0, rng), x)

    def test_perturb_variance(self, rng):
        x = np.zeros((20_000, 5))
        assert perturb(x, 3.0, rng).var() == pytest.approx(9.0, rel=0.03)

    def test_perturb_negative_sigma(self, rng):
        with pytest.raises(DiffusionError):
            perturb(np.zeros((2, 2)), -0.1, rng)


class TestStepSchedule:
    def test_two_steps(self):
        levels = step_schedule(NoiseSchedule(n_steps=2))
        np.testing.assert_array_equal(levels, [80.0, 0.002, 0.0])

    def test_linear_spacing_with_unit_rho(self):
        levels = step_schedule(NoiseSchedule(sigma_min=1.0, sigma_max=9.0, rho=1.0, n_steps=3))
        np.testing.assert_allclose(levels, [9.0, 5.0, 1.0, 0.0])

    def test_default_schedule_descends(self):
        levels = step_schedule(NoiseSchedule())
        assert len(levels) == 41
        assert levels[0] == 80.0 and levels[-2] == 0.002 and levels[-1] == 0.0
        assert np.all(np.diff(levels) < 0)

    def test_single_step_rejected(self):
        with pytest.raises(DiffusionError):
            step_schedule(NoiseSchedule(n_steps=1))


class TestDenoise:
    def test_zero_network_scales_input(self, rng):
        x = rng.normal(size=(6, 5))
        c_skip, _, _, _ = preconditioning(1.3, 0.5)
        np.testing.assert_allclose(denoise(ZeroNetwork(), x, 1.3), c_skip * x)

    def test_zero_sigma_returns_input(self, rng):
        x = rng.normal(size=(6, 5))
        out = denoise(_random_network(5), x, 0.0)
        np.testing.assert_array_equal(out, x)
        assert out is not x

    def test_gaussian_oracle_is_posterior_mean(self, rng):
        mu, s, sigma = rng.normal(size=5), 0.7, 2.0
        oracle = gaussian_oracle_denoiser(mu, s)
        x = rng.normal(size=(8, 5)) * 3.0
        expected = (s ** 2 * x + sigma ** 2 * mu) / (s ** 2 + sigma ** 2)
        np.testing.assert_allclose(denoise(oracle, x, sigma), expected, rtol=1e-12)

    def test_oracle_limits(self, rng):
        mu = rng.normal(size=3)
        x = rng.normal(size=(4, 3))
        np.testing.assert_allclose(denoise(gaussian_oracle_denoiser(mu, 0.0), x, 1.0),
                                   np.broadcast_to(mu, x.shape), atol=1e-12)
        np.testing.assert_allclose(denoise(gaussian_oracle_denoiser(mu, 1.0), x, 1.0),
                                   0.5 * (x + mu), atol=1e-12)

    def test_rows_are_denoised_independently(self, rng):
        net = _random_network(5)
        x = rng.normal(size=(12, 5))
        perm = rng.permutation(12)
        np.testing.assert_allclose(denoise(net, x, 0.8)[perm], denoise(net, x[perm], 0.8))

    def test_condition_row_mismatch(self):
        with pytest.raises(DiffusionError):
            denoise(ZeroNetwork(), np.zeros((3, 5)), 1.0, condition=np.zeros((2, 2)))

    def test_state_must_be_a_matrix(self):
        with pytest.raises(DiffusionError):
            denoise(ZeroNetwork(), np.zeros(5), 1.0)


class TestEdmLoss:
    def test_perfect_denoiser_has_zero_loss(self, rng):
        x = rng.normal(size=(10, 5))
        oracle = gaussian_oracle_denoiser(x, 0.0)
        noise = rng.standard_normal(x.shape)
        assert edm_loss(oracle, x, 1.0, None, np.ones(5), noise) == pytest.approx(0.0, abs=1e-12)

    def test_zero_network_at_sigma_data(self, rng):
        # x = 0 gives x_hat = c_skip sigma eps; the weight makes this 0.5 eps^2
        noise = rng.standard_normal((10, 5))
        loss = edm_loss(ZeroNetwork(), np.zeros((10, 5)), 0.5, None, np.ones(5), noise)
        assert loss == pytest.approx(0.5 * np.mean(noise ** 2), rel=1e-12)

    def test_weights_scale_the_loss(self, rng):
        x = rng.normal(size=(10, 5))
        noise = rng.standard_normal(x.shape)
        once = edm_loss(ZeroNetwork(), x, 0.3, None, np.ones(5), noise)
        twice = edm_loss(ZeroNetwork(), x, 0.3, None, 2.0 * np.ones(5), noise)
        assert twice == pytest.approx(2.0 * once, rel=1e-12)

    @pytest.mark.parametrize("weights", [[1.0, 1.0, 0.0, 1.0, 1.0], [1.0, -1.0, 1.0, 1.0, 1.0], [1.0, 1.0]])
    def test_invalid_weights(self, weights):
        with pytest.raises(DiffusionError):
            edm_loss(ZeroNetwork(), np.zeros((2, 5)), 1.0, None, weights, np.zeros((2, 5)))


class TestHeunSampler:
    def test_evaluation_count(self, rng):
        counter = EvaluationCounter(ZeroNetwork())
        heun_sample(counter, None, NoiseSchedule(n_steps=7), rng, (3, 5))
        assert counter.count == 2 * 7 - 1

    def test_zero_data_collapses_to_origin(self, rng):
        oracle = gaussian_oracle_denoiser(np.zeros(5), 0.0)
        out = heun_sample(oracle, None, NoiseSchedule(), rng, (50, 5))
        assert np.abs(out).max() < 1e-3 * 80.0

    def test_deterministic_given_seed(self):
        net = _random_network(5)
        a = heun_sample(net, None, NoiseSchedule(n_steps=8), np.random.default_rng(5), (20, 5))
        b = heun_sample(net, None, NoiseSchedule(n_steps=8), np.random.default_rng(5), (20, 5))
        np.testing.assert_array_equal(a, b)

    def test_churn_injects_noise(self):
        net = _random_network(5)
        plain = heun_sample(net, None, NoiseSchedule(n_steps=8), np.random.default_rng(5), (20, 5))
        churned = heun_sample(net, None, NoiseSchedule(n_steps=8, churn=4.0),
                              np.random.default_rng(5), (20, 5))
        assert np.all(np.isfinite(churned))
        assert not np.array_equal(plain, churned)

    def test_single_step_matches_two_evaluations(self, rng):
        oracle = gaussian_oracle_denoiser(np.ones(3), 0.5)
        x = rng.normal(size=(4, 3)) * 2.0
        d_cur = (x - denoise(oracle, x, 2.0)) / 2.0
        x_euler = x - 1.0 * d_cur
        d_prime = (x_euler - denoise(oracle, x_euler, 1.0)) / 1.0
        np.testing.assert_allclose(heun_step(oracle, x, 2.0, 1.0), x - 0.5 * (d_cur + d_prime))

    def test_converges_with_more_steps(self):
        # with mu = 0 the sampler is linear: x_final = gain * x_start
        s, schedule = 0.5, NoiseSchedule()
        oracle = gaussian_oracle_denoiser(np.zeros(1), s)
        exact = s ** 2 / (math.sqrt(s ** 2 + schedule.sigma_min ** 2)
                          * math.sqrt(s ** 2 + schedule.sigma_max ** 2))
        errors = []
        for n in (5, 10, 20, 40):
            schedule.n_steps = n
            out = heun_sample(oracle, None, schedule, np.random.default_rng(0), (4, 1))
            start = np.random.default_rng(0).standard_normal((4, 1)) * schedule.sigma_max
            errors.append(abs(float(np.mean(out / start)) - exact))
        slope = np.polyfit(np.log([5, 10, 20, 40]), np.log(errors), 1)[0]
        assert slope <= -1.0

    @pytest.mark.slow
    def test_gaussian_moments(self):
        rng = np.random.default_rng(21)
        dim, count, s = 32, 10_000, 0.5
        mu = rng.uniform(-0.5, 0.5, dim)
        out = heun_sample(gaussian_oracle_denoiser(mu, s), None, NoiseSchedule(), rng, (count, dim))
        z = (out.mean(axis=0) - mu) / (s / math.sqrt(count))
        assert np.sqrt(np.mean(z ** 2)) < 1.5
        assert np.abs(z).max() < 5.0
        assert np.mean(out.var(axis=0)) == pytest.approx(s ** 2, rel=0.05)


class TestConsistency:
    def test_boundary_is_identity(self, rng):
        f = ConsistencyModel(_random_network(5), sigma_min=0.002)
        x = rng.normal(size=(7, 5))
        np.testing.assert_array_equal(f(x, 0.002), x)

    def test_below_boundary_rejected(self, rng):
        f = ConsistencyModel(ZeroNetwork(), sigma_min=0.002)
        with pytest.raises(DiffusionError):
            f(np.zeros((2, 5)), 0.001)

    def test_ema_decay_one_freezes_target(self):
        target = ConsistencyModel(_random_network(5, seed=0), 0.002)
        source = ConsistencyModel(_random_network(5, seed=7), 0.002)
        before = {k: v.copy() for k, v in target.params.items()}
        target.ema_update(source, 1.0)
        for name, value in target.params.items():
            np.testing.assert_array_equal(value, before[name])

    def test_ema_decay_zero_copies_source(self):
        target = ConsistencyModel(_random_network(5, seed=0), 0.002)
        source = ConsistencyModel(_random_network(5, seed=7), 0.002)
        target.ema_update(source, 0.0)
        for name, value in target.params.items():
            np.testing.assert_allclose(value, source.params[name])

    def test_copy_is_independent(self):
        f = ConsistencyModel(_random_network(5), 0.002)
        g = f.copy()
        g.params["v"] += 1.0
        assert not np.array_equal(f.params["v"], g.params["v"])

    def test_sample_steps(self, rng):
        net = CountingNetwork()
        f = ConsistencyModel(net, 0.002)
        out = consistency_sample(f, None, NoiseSchedule(), rng, (4, 5), steps=1)
        assert out.shape == (4, 5) and net.count == 1
        consistency_sample(f, None, NoiseSchedule(), rng, (4, 5), steps=3)
        assert net.count == 4
        with pytest.raises(DiffusionError):
            consistency_sample(f, None, NoiseSchedule(), rng, (4, 5), steps=0)

    def test_sample_deterministic_given_seed(self):
        f = ConsistencyModel(_random_network(5), 0.002)
        a = consistency_sample(f, None, NoiseSchedule(), np.random.default_rng(3), (9, 5), steps=2)
        b = consistency_sample(f, None, NoiseSchedule(), np.random.default_rng(3), (9, 5), steps=2)
        np.testing.assert_array_equal(a, b)

    def test_divergence_is_reported(self, rng):
        f = ConsistencyModel(NanNetwork(), 0.002)
        teacher = gaussian_oracle_denoiser(np.zeros(2), 0.5)
        config = DistillConfig(steps=5, batch_size=8)
        with pytest.raises(DivergenceError):
            consistency_distill(f, teacher, lambda r: (r.normal(size=(8, 2)), None),
                                NoiseSchedule(n_steps=10), config, rng)


def _gaussian_stream(mu, s, rows):
    def stream(rng):
        return mu + s * rng.standard_normal((rows, len(mu))), None
    return stream


class TestDistillation:
    mu = np.array([1.0, -1.5])
    s = 0.5

    def _model(self):
        net = ResidualDenoiser(2, 0, Stage2ModelConfig(hidden=0), seed=0)
        return ConsistencyModel(net, sigma_min=0.002)

    def test_loss_finite_and_decreasing(self, rng):
        model = self._model()
        teacher = gaussian_oracle_denoiser(self.mu, self.s)
        config = DistillConfig(steps=100, batch_size=128, ema_decay=0.9,
                               optimizer=OptimizerConfig(learning_rate=1e-2))
        history = consistency_distill(model, teacher, _gaussian_stream(self.mu, self.s, 128),
                                      NoiseSchedule(n_steps=10), config, rng)
        assert len(history) == 100
        assert np.all(np.isfinite(history))
        assert np.mean(history[-20:]) < np.mean(history[:20])

    @pytest.mark.slow
    def test_one_step_matches_heun_moments(self):
        rng = np.random.default_rng(8)
        schedule = NoiseSchedule(n_steps=10)
        teacher = gaussian_oracle_denoiser(self.mu, self.s)
        model = self._model()
        config = DistillConfig(steps=3000, batch_size=256, ema_decay=0.95,
                               optimizer=OptimizerConfig(learning_rate=5e-3))
        consistency_distill(model, teacher, _gaussian_stream(self.mu, self.s, 256),
                            schedule, config, rng)

        shape = (20_000, 2)
        one_step = consistency_sample(model, None, schedule, np.random.default_rng(1), shape)
        reference = heun_sample(teacher, None, schedule, np.random.default_rng(2), shape)
        ref_mean, ref_var = reference.mean(axis=0), reference.var(axis=0)
        assert np.all(np.abs(one_step.mean(axis=0) - ref_mean) <= 0.05 * np.abs(ref_mean))
        np.testing.assert_allclose(one_step.var(axis=0), ref_var, rtol=0.10)

    @pytest.mark.slow
    def test_one_step_matches_heun_moments_in_32_dimensions(self):
        mu = np.random.default_rng(32).uniform(-0.5, 0.5, 32)
        rng = np.random.default_rng(9)
        schedule = NoiseSchedule(n_steps=10)
        teacher = gaussian_oracle_denoiser(mu, self.s)
        model = ConsistencyModel(ResidualDenoiser(32, 0, Stage2ModelConfig(hidden=0), seed=0),
                                 sigma_min=0.002)
        config = DistillConfig(steps=4000, batch_size=256, ema_decay=0.95,
                               optimizer=OptimizerConfig(learning_rate=5e-3))
        consistency_distill(model, teacher, _gaussian_stream(mu, self.s, 256), schedule, config, rng)

        shape = (20_000, 32)
        one_step = consistency_sample(model, None, schedule, np.random.default_rng(1), shape)
        reference = heun_sample(teacher, None, schedule, np.random.default_rng(2), shape)
        np.testing.assert_allclose(one_step.mean(axis=0), reference.mean(axis=0), atol=0.05)
        np.testing.assert_allclose(one_step.var(axis=0), reference.var(axis=0), rtol=0.10)
