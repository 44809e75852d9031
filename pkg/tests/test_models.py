import math

import numpy as np
import pytest

from agriradar.diffusion import (
    DiffusionError,
    DivergenceError,
    NoiseSchedule,
    edm_loss,
    sample_training_sigma,
)
from agriradar.errors import ConfigError
from agriradar.models import (
    PipelineError,
    ReferencePredictor,
    ResidualDenoiser,
    Stage1TrainConfig,
    Stage2ModelConfig,
    Stage2TrainConfig,
    stage1_loss,
    train_denoiser,
    train_stage1,
)
from agriradar.models.stage1 import _batches, local_features
from agriradar.models.stage2 import edm_loss_and_grad
from agriradar.optim import Optimizer, OptimizerConfig
from agriradar.preprocess import StageOneInput
from agriradar.scene_sim import ClassLabel
from agriradar.sparse_grid import SparseVoxelTensor
from agriradar.supervision import StageOneTarget, one_hot


def _isolated_support(spec, count, rng):
    """Voxels on an even lattice, so no two are 26-neighbors."""
    lattice = np.stack(np.meshgrid(*[np.arange(0, d, 2) for d in spec.dims], indexing="ij"), -1)
    lattice = lattice.reshape(-1, 3)
    picks = lattice[rng.choice(len(lattice), size=count, replace=False)]
    return np.unique(spec.ravel(picks))


def _stage1_pair(spec, keys, power, y_st, codes):
    features = np.column_stack([power, np.zeros(len(keys))])
    sample = StageOneInput(SparseVoxelTensor.from_keys(spec, keys, features))
    target = StageOneTarget(spec, sample.indices, np.asarray(y_st, float).reshape(-1, 1), one_hot(codes))
    return sample, target


class TestStageOneLoss:
    def _target(self, small_grid, y_st, codes):
        idx = small_grid.unravel(np.arange(len(codes)))
        return StageOneTarget(small_grid, idx, np.asarray(y_st, float).reshape(-1, 1), one_hot(codes))

    def test_uninformed_prediction(self, small_grid):
        target = self._target(small_grid, [0.5, 0.5], [1, 3])
        loss = stage1_loss(np.full((2, 1), 0.5), np.full((2, 5), 0.2), target, np.ones(5))
        assert loss == pytest.approx(math.log(2.0) + math.log(5.0))

    def test_perfect_prediction(self, small_grid):
        target = self._target(small_grid, [1.0, 0.0], [2, 0])
        loss = stage1_loss(target.y_st.copy(), target.y_se.copy(), target, np.ones(5))
        assert 0.0 <= loss <= 1e-6

    def test_class_weights_scale_semantic_term(self, small_grid):
        target = self._target(small_grid, [1.0, 1.0], [1, 1])
        y_st = np.ones((2, 1))
        base = stage1_loss(y_st, np.full((2, 5), 0.2), target, np.ones(5))
        weighted = stage1_loss(y_st, np.full((2, 5), 0.2), target, [1.0, 3.0, 1.0, 1.0, 1.0])
        assert weighted == pytest.approx(3.0 * base, rel=1e-6)

    def test_shape_mismatch(self, small_grid):
        target = self._target(small_grid, [1.0, 0.0], [2, 0])
        with pytest.raises(PipelineError):
            stage1_loss(np.ones((3, 1)), np.full((3, 5), 0.2), target, np.ones(5))
        with pytest.raises(PipelineError):
            stage1_loss(np.ones((2, 1)), np.full((2, 5), 0.2), target, np.ones(4))


class TestStageOneTraining:
    def test_local_features_count_neighbors(self, small_grid):
        keys = np.sort(small_grid.ravel(np.array([[5, 5, 5], [6, 5, 5], [9, 9, 9]])))
        sample = StageOneInput(SparseVoxelTensor.from_keys(
            small_grid, keys, np.array([[0.2, 1.0], [0.4, 0.0], [1.0, 1.0]])))
        features = local_features(sample)
        np.testing.assert_allclose(features[:, 4], [1, 1, 0])
        np.testing.assert_allclose(features[0, 2], 0.4)
        np.testing.assert_allclose(features[1, 3], 1.0)

    def test_learns_a_separable_rule(self, small_grid, rng):
        keys = _isolated_support(small_grid, 1000, rng)
        power = rng.uniform(0.0, 1.0, len(keys))
        occupied = power > 0.5
        codes = np.where(occupied, ClassLabel.GROUND, ClassLabel.FREE)
        pair = _stage1_pair(small_grid, keys, power, occupied, codes)

        model, history = train_stage1([pair], Stage1TrainConfig(epochs=200), seed=0)
        assert history[-1] <= 0.8 * history[0]
        y_st_hat, y_se_hat = model.evaluate(pair[0])
        assert np.mean((y_st_hat[:, 0] > 0.5) == occupied) >= 0.95
        assert np.mean(y_se_hat.argmax(axis=1) == codes) >= 0.95

    def test_uninformative_features_give_class_priors(self, small_grid, rng):
        keys = _isolated_support(small_grid, 1000, rng)
        n = len(keys)
        codes = np.repeat([ClassLabel.GROUND, ClassLabel.TREE, ClassLabel.FREE],
                          [int(0.7 * n), int(0.2 * n), n - int(0.7 * n) - int(0.2 * n)])
        pair = _stage1_pair(small_grid, keys, np.zeros(n), codes != ClassLabel.FREE, codes)

        config = Stage1TrainConfig(epochs=200, batch_size=0, class_weighting=False)
        model, _ = train_stage1([pair], config, seed=0)
        y_st_hat, y_se_hat = model.evaluate(pair[0])
        priors = np.bincount(codes, minlength=5) / n
        np.testing.assert_allclose(y_se_hat, np.broadcast_to(priors, y_se_hat.shape), atol=0.03)
        np.testing.assert_allclose(y_st_hat, 1.0 - priors[ClassLabel.FREE], atol=0.03)

    def test_minibatches_and_seed(self, small_grid, rng):
        keys = _isolated_support(small_grid, 300, rng)
        power = rng.uniform(0.0, 1.0, len(keys))
        pair = _stage1_pair(small_grid, keys, power, power > 0.5, np.where(power > 0.5, 3, 0))
        config = Stage1TrainConfig(epochs=5, batch_size=32)
        a, history = train_stage1([pair], config, seed=4)
        b, _ = train_stage1([pair], config, seed=4)
        assert len(history) == 5
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_untrained_predictor_is_uniform(self, small_grid, rng):
        keys = _isolated_support(small_grid, 20, rng)
        sample, _ = _stage1_pair(small_grid, keys, rng.uniform(size=len(keys)), np.zeros(len(keys)),
                                 np.zeros(len(keys), int))
        y_st_hat, y_se_hat = ReferencePredictor().evaluate(sample)
        np.testing.assert_allclose(y_st_hat, 0.5)
        np.testing.assert_allclose(y_se_hat, 0.2)

    def test_default_is_shuffled_minibatch(self):
        size = Stage1TrainConfig().batch_size
        assert size > 0
        batches = list(_batches(3 * size + 7, size, np.random.default_rng(0)))
        assert [len(b) for b in batches] == [size, size, size, 7]
        assert sorted(np.concatenate(batches).tolist()) == list(range(3 * size + 7))
        assert not np.array_equal(np.concatenate(batches), np.arange(3 * size + 7))

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            train_stage1([], Stage1TrainConfig(epochs=0), seed=0)


def _stage2_samples(rng, count=4, rows=30):
    samples = []
    for _ in range(count):
        codes = rng.integers(1, 5, rows)
        condition = np.column_stack([np.ones(rows), codes.astype(float)])
        samples.append((one_hot(codes), condition))
    return samples


class TestResidualDenoiser:
    def test_output_is_zero_at_init(self, rng):
        model = ResidualDenoiser(5, 2)
        x, cond = _stage2_samples(rng, count=1)[0]
        np.testing.assert_array_equal(model.evaluate(x, 0.7, cond), 0.0)

    def test_condition_width_checked(self, rng):
        with pytest.raises(DiffusionError):
            ResidualDenoiser(5, 1)
        model = ResidualDenoiser(5, 2)
        with pytest.raises(DiffusionError):
            model.evaluate(np.zeros((3, 5)), 1.0, None)
        with pytest.raises(DiffusionError):
            ResidualDenoiser(5, 0).evaluate(np.zeros((3, 4)), 1.0, None)

    def test_gradient_matches_central_differences(self, rng):
        model = ResidualDenoiser(5, 2, Stage2ModelConfig(hidden=8), seed=3)
        for name in ("v", "w2", "b2", "b1"):
            model.params[name] = 0.2 * rng.standard_normal(model.params[name].shape)
        x, cond = _stage2_samples(rng, count=1, rows=12)[0]
        sigma = np.exp(rng.normal(-1.2, 1.2, size=(12, 1)))
        noise = rng.standard_normal(x.shape)
        weights = np.array([0.5, 1.0, 2.0, 1.5, 1.0])

        loss, grads = edm_loss_and_grad(model, x, sigma, cond, weights, noise)
        assert loss == pytest.approx(edm_loss(model, x, sigma, cond, weights, noise), rel=1e-12)

        step = 1e-3
        for name, param in model.params.items():
            numeric = np.zeros_like(param)
            for i in np.ndindex(param.shape):
                saved = param[i]
                param[i] = saved + step
                up = edm_loss(model, x, sigma, cond, weights, noise)
                param[i] = saved - step
                down = edm_loss(model, x, sigma, cond, weights, noise)
                param[i] = saved
                numeric[i] = (up - down) / (2.0 * step)
            error = np.linalg.norm(numeric - grads[name]) / np.linalg.norm(grads[name])
            assert error < 1e-4, name


class TestStageTwoTraining:
    def _eval_loss(self, model, samples, draws=64):
        rng = np.random.default_rng(99)
        x = np.concatenate([s[0] for s in samples])
        cond = np.concatenate([s[1] for s in samples])
        sigmas = sample_training_sigma(NoiseSchedule(), rng, size=draws)
        return float(np.mean([
            edm_loss(model, x, sigma, cond, np.ones(5), rng.standard_normal(x.shape))
            for sigma in sigmas
        ]))

    def test_loss_decreases_on_fixed_dataset(self, rng):
        samples = _stage2_samples(rng)
        model = ResidualDenoiser(5, 2, seed=0)
        before = self._eval_loss(model, samples)
        config = Stage2TrainConfig(steps=500, batch_size=4,
                                   optimizer=OptimizerConfig(learning_rate=2e-2))
        history = train_denoiser(model, samples, NoiseSchedule(), config, rng)
        assert len(history) == 500
        assert np.all(np.isfinite(history))
        assert self._eval_loss(model, samples) <= 0.7 * before

    def test_linear_network_trains(self, rng):
        model = ResidualDenoiser(5, 2, Stage2ModelConfig(hidden=0))
        config = Stage2TrainConfig(steps=20, batch_size=2)
        history = train_denoiser(model, _stage2_samples(rng), NoiseSchedule(per_row_sigma=True), config, rng)
        assert len(history) == 20 and np.all(np.isfinite(history))

    def test_divergence_is_reported(self, rng):
        model = ResidualDenoiser(5, 2)
        model.params["b2"][:] = np.nan
        with pytest.raises(DivergenceError):
            train_denoiser(model, _stage2_samples(rng), NoiseSchedule(), Stage2TrainConfig(steps=3), rng)

    def test_needs_samples(self, rng):
        empty = [(np.zeros((0, 5)), np.zeros((0, 2)))]
        with pytest.raises(DiffusionError):
            train_denoiser(ResidualDenoiser(5, 2), empty, NoiseSchedule(), Stage2TrainConfig(steps=3), rng)


class TestOptimizer:
    def test_sgd_step(self):
        params = {"p": np.array([1.0, 2.0])}
        Optimizer(OptimizerConfig(name="sgd", learning_rate=0.1)).step(params, {"p": np.array([1.0, -2.0])})
        np.testing.assert_allclose(params["p"], [0.9, 2.2])

    def test_adam_first_step_is_learning_rate(self):
        params = {"p": np.zeros(3)}
        Optimizer(OptimizerConfig(learning_rate=0.01)).step(params, {"p": np.array([5.0, -0.1, 2.0])})
        np.testing.assert_allclose(params["p"], [-0.01, 0.01, -0.01], rtol=1e-6)

    def test_gradient_clipping(self):
        params = {"p": np.zeros(2)}
        config = OptimizerConfig(name="sgd", learning_rate=1.0, grad_clip=1.0)
        Optimizer(config).step(params, {"p": np.array([3.0, 4.0])})
        np.testing.assert_allclose(params["p"], [-0.6, -0.8])

    def test_adam_minimizes_a_quadratic(self):
        params = {"p": np.zeros(4)}
        optimizer = Optimizer(OptimizerConfig(learning_rate=0.05))
        for _ in range(1000):
            optimizer.step(params, {"p": 2.0 * (params["p"] - 3.0)})
        np.testing.assert_allclose(params["p"], 3.0, atol=1e-2)

    @pytest.mark.parametrize("config", [
        OptimizerConfig(name="rmsprop"),
        OptimizerConfig(learning_rate=0.0),
        OptimizerConfig(beta1=1.0),
        OptimizerConfig(grad_clip=-1.0),
    ])
    def test_invalid_config(self, config):
        with pytest.raises(ConfigError):
            Optimizer(config)
