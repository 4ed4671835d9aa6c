import math

import numpy as np
import pytest

from chunklab.model import (
    MlpConfig,
    ParamVector,
    SingularSystemError,
    forward_logits,
    least_squares_fit,
    load_param_vector,
    loss_and_grad,
    mlp_init,
    predict,
    save_param_vector,
    sgd_step,
    softmax,
)
from chunklab.rng import generator

from helpers import finite_difference_grad, relative_error


class TestParamVector:
    def test_length_must_match_layout(self):
        with pytest.raises(ValueError, match="layout"):
            ParamVector(np.zeros(5), (("w", (2, 2)),))

    def test_arithmetic(self):
        layout = (("w", (2,)),)
        a = ParamVector(np.array([1.0, 2.0]), layout)
        b = ParamVector(np.array([3.0, 4.0]), layout)
        np.testing.assert_array_equal((a + b).values, [4.0, 6.0])
        np.testing.assert_array_equal((a - b).values, [-2.0, -2.0])
        np.testing.assert_array_equal((2.0 * a).values, [2.0, 4.0])

    def test_layout_mismatch_rejected(self):
        a = ParamVector(np.zeros(2), (("w", (2,)),))
        b = ParamVector(np.zeros(2), (("v", (2,)),))
        with pytest.raises(ValueError, match="layout"):
            a + b

    def test_segment_views(self):
        config = MlpConfig((2, 3, 2))
        params = mlp_init(config, seed=0)
        assert params.segment("layer0.weight").shape == (2, 3)
        assert params.segment("layer1.bias").shape == (2,)
        with pytest.raises(KeyError):
            params.segment("missing")

    def test_pvec_round_trip(self, tmp_path):
        params = mlp_init(MlpConfig((3, 4, 2)), seed=9)
        save_param_vector(params, tmp_path / "weights.pvec")
        loaded = load_param_vector(tmp_path / "weights.pvec")
        assert loaded.layout == params.layout
        np.testing.assert_array_equal(loaded.values, params.values)


class TestMlpInit:
    def test_param_count(self):
        # 2*4 + 4 weights/bias for the hidden layer, 4*3 + 3 for the output.
        assert len(mlp_init(MlpConfig((2, 4, 3)), seed=0)) == 27

    def test_deterministic(self):
        a = mlp_init(MlpConfig((5, 7, 3)), seed=4)
        b = mlp_init(MlpConfig((5, 7, 3)), seed=4)
        np.testing.assert_array_equal(a.values, b.values)

    def test_biases_zero(self):
        params = mlp_init(MlpConfig((4, 6, 2)), seed=1)
        assert np.all(params.segment("layer0.bias") == 0)
        assert np.all(params.segment("layer1.bias") == 0)

    def test_weight_scale_follows_fan_in(self):
        params = mlp_init(MlpConfig((100, 200, 10)), seed=2)
        observed = params.segment("layer0.weight").std()
        assert observed == pytest.approx(math.sqrt(2.0 / 100), rel=0.05)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MlpConfig((3,))
        with pytest.raises(ValueError):
            MlpConfig((3, 0, 2))
        with pytest.raises(ValueError):
            MlpConfig((3, 2), activation="sigmoid")


class TestLossAndGrad:
    def test_uniform_softmax_loss_is_log_class_count(self):
        for classes in (2, 4, 7):
            config = MlpConfig((3, classes))
            zero = ParamVector(np.zeros(config.param_count), config.layout())
            rng = generator(0)
            batch = (rng.standard_normal((8, 3)), rng.integers(0, classes, 8))
            loss, _ = loss_and_grad(zero, config, batch)
            assert loss == pytest.approx(math.log(classes), abs=1e-12)

    def test_softmax_rows_sum_to_one(self):
        rng = generator(1)
        probs = softmax(rng.standard_normal((50, 6)) * 30)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    @pytest.mark.parametrize("sizes", [(2, 3), (3, 5, 4), (2, 4, 4, 3)])
    def test_gradient_matches_finite_differences(self, activation, sizes):
        # fully random parameters (biases too) keep relu pre-activations in
        # generic position, away from the kink where the oracle is invalid
        config = MlpConfig(sizes, activation)
        rng = generator(len(sizes), 1 if activation == "relu" else 2)
        params = ParamVector(0.7 * rng.standard_normal(config.param_count), config.layout())
        batch = (rng.standard_normal((6, sizes[0])), rng.integers(0, sizes[-1], 6))
        _, grad = loss_and_grad(params, config, batch)
        numeric = finite_difference_grad(params, config, batch)
        assert relative_error(grad.values, numeric) < 1e-4

    def test_perfect_logits_drive_loss_to_zero_monotonically(self):
        config = MlpConfig((2, 3))
        features = np.array([[1.0, 0.0]])
        labels = np.array([1])
        losses = []
        for scale in (1.0, 4.0, 16.0, 64.0):
            # weight column for the true class aligned with the input
            weights = np.zeros((2, 3))
            weights[0, 1] = scale
            params = ParamVector(
                np.concatenate([weights.ravel(), np.zeros(3)]), config.layout()
            )
            loss, _ = loss_and_grad(params, config, (features, labels))
            losses.append(loss)
        assert all(a > b for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 1e-12

    def test_dimension_mismatch_rejected(self):
        config = MlpConfig((3, 2))
        params = mlp_init(config, seed=0)
        with pytest.raises(ValueError):
            loss_and_grad(params, config, (np.zeros((2, 4)), np.zeros(2, dtype=int)))

    def test_empty_batch_rejected(self):
        config = MlpConfig((3, 2))
        params = mlp_init(config, seed=0)
        with pytest.raises(ValueError, match="non-empty"):
            loss_and_grad(params, config, (np.zeros((0, 3)), np.zeros(0, dtype=int)))

    def test_predict_breaks_ties_toward_lowest_class(self):
        config = MlpConfig((2, 3))
        zero = ParamVector(np.zeros(config.param_count), config.layout())
        assert np.all(predict(zero, config, np.ones((4, 2))) == 0)

    def test_forward_logits_shape(self):
        config = MlpConfig((3, 5, 4))
        params = mlp_init(config, seed=0)
        assert forward_logits(params, config, np.zeros((7, 3))).shape == (7, 4)


class TestSgdStep:
    def test_zero_lr_is_identity(self):
        params = mlp_init(MlpConfig((2, 3)), seed=0)
        _, grad = loss_and_grad(
            params, MlpConfig((2, 3)), (np.ones((2, 2)), np.array([0, 1]))
        )
        np.testing.assert_array_equal(sgd_step(params, grad, 0.0).values, params.values)

    def test_unit_lr_with_grad_equal_params_gives_zero(self):
        params = mlp_init(MlpConfig((2, 3)), seed=1)
        stepped = sgd_step(params, params, 1.0)
        np.testing.assert_array_equal(stepped.values, np.zeros(len(params)))

    def test_two_steps_match_summed_gradient(self):
        config = MlpConfig((3, 4, 2))
        params = mlp_init(config, seed=2)
        rng = generator(3)
        batch_a = (rng.standard_normal((4, 3)), rng.integers(0, 2, 4))
        batch_b = (rng.standard_normal((4, 3)), rng.integers(0, 2, 4))
        _, grad_a = loss_and_grad(params, config, batch_a)
        _, grad_b = loss_and_grad(params, config, batch_b)
        chained = sgd_step(sgd_step(params, grad_a, 0.1), grad_b, 0.1)
        summed = sgd_step(params, grad_a + grad_b, 0.1)
        np.testing.assert_allclose(chained.values, summed.values, rtol=1e-12, atol=1e-15)


class TestLeastSquares:
    def test_identity_design_returns_targets(self):
        y = np.array([3.0, -1.0, 2.0])
        np.testing.assert_allclose(least_squares_fit(np.eye(3), y, 0.0), y)

    def test_noiseless_recovery(self):
        rng = generator(5)
        X = rng.standard_normal((40, 6))
        truth = rng.standard_normal(6)
        fitted = least_squares_fit(X, X @ truth, 0.0)
        assert np.linalg.norm(fitted - truth) < 1e-8

    def test_zero_design_with_jitter_returns_zero(self):
        fitted = least_squares_fit(np.zeros((5, 3)), np.ones(5), jitter=1.0)
        np.testing.assert_array_equal(fitted, np.zeros(3))

    def test_normal_equations_residual(self):
        rng = generator(6)
        X = rng.standard_normal((30, 4))
        y = rng.standard_normal(30)
        fitted = least_squares_fit(X, y, 0.0)
        residual = X.T @ (X @ fitted - y)
        assert np.linalg.norm(residual) <= 1e-8 * np.linalg.norm(X.T @ y)

    def test_singular_without_jitter_advises_jitter(self):
        X = np.ones((4, 2))  # rank one
        with pytest.raises(SingularSystemError, match="jitter"):
            least_squares_fit(X, np.ones(4), 0.0)

    def test_auto_jitter_solves_singular_system(self):
        X = np.ones((4, 2))
        fitted = least_squares_fit(X, np.ones(4), jitter="auto")
        assert np.all(np.isfinite(fitted))
        # symmetric problem: both coordinates carry equal weight
        assert fitted[0] == pytest.approx(fitted[1])
