import numpy as np
import pytest
from numpy.testing import assert_allclose

from core.errors import SingularityError, TrainingDivergedError, ValidationError
from core.trajectory import Path, make_rng
from core.vector_fields import (CallableField, GmmMarginalField, GmmTarget, MlpField, OtConditionalField,
                                cfm_batch, cfm_train_step, field_distance, gmm_marginal, gmm_posterior,
                                ot_conditional, sample_probes, smoothed)


def two_component_gmm(shift=0.0):
    means = np.array([[[0.0, 1.0, 2.0], [0.0, 0.5, 0.0]],
                      [[0.0, 1.0, 2.0], [0.0, -0.5, 0.0]]]) + shift
    return GmmTarget(weights=np.array([0.3, 0.7]), means=means, stds=np.array([0.2, 0.4]))


class TestOtConditional:

    def test_value(self):
        target = Path(np.array([[1.0, 2.0]]))
        tau = Path(np.array([[0.0, 0.0]]))
        assert_allclose(ot_conditional(target, tau, 0.5).data, [[2.0, 4.0]])

    def test_singular_at_one(self):
        field = OtConditionalField(Path(np.zeros((2, 2))))
        with pytest.raises(SingularityError):
            field.velocity(np.zeros((2, 2)), 1.0)

    def test_call_wraps_paths(self):
        field = OtConditionalField(Path(np.ones((2, 2))))
        result = field(Path(np.zeros((2, 2))), 0.0)
        assert isinstance(result, Path)
        assert_allclose(result.data, 1.0)


class TestGmmField:

    def test_single_component_closed_form(self):
        mu = np.array([[1.0, -1.0, 0.5]])
        gmm = GmmTarget(weights=np.array([1.0]), means=mu[None], stds=np.array([0.5]))
        x = np.array([[0.2, 0.1, -0.3]])
        t = 0.4
        var = (t * 0.5) ** 2 + (1 - t) ** 2
        expected = mu + t * 0.25 / var * (x - t * mu)
        _, mean = gmm_posterior(gmm, x, t)
        assert_allclose(mean, expected, rtol=1e-12)

    def test_weights_are_normalised(self):
        gmm = two_component_gmm()
        rng = make_rng(8)
        for t in (0.0, 0.2, 0.6, 0.95):
            for _ in range(5):
                weights, _ = gmm_posterior(gmm, 3.0 * rng.normal(size=(2, 3)), t)
                assert abs(weights.sum() - 1.0) <= 1e-12
                assert np.all(weights >= 0.0)

    def test_narrow_single_component_is_the_conditional_field(self):
        target = Path(np.array([[1.0, 2.5, 4.0], [0.5, -1.0, 0.0]]))
        gmm = GmmTarget(weights=np.array([1.0]), means=target.data[None], stds=np.array([1e-6]))
        tau = Path(make_rng(6).normal(size=(2, 3)))
        for t in (0.0, 0.3, 0.6, 0.9):
            assert_allclose(gmm_marginal(gmm, tau, t).data, ot_conditional(target, tau, t).data,
                            rtol=1e-6, atol=1e-8)

    def test_symmetric_mixture_has_zero_field_at_the_origin(self):
        mu = np.array([[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]])
        gmm = GmmTarget(weights=np.array([0.5, 0.5]), means=np.stack([mu, -mu]), stds=np.array([0.3, 0.3]))
        for t in (0.0, 0.4, 0.8):
            assert_allclose(gmm_marginal(gmm, Path(np.zeros((2, 3))), t).data, 0.0, atol=1e-12)

    def test_posterior_mean_matches_importance_sampling(self):
        gmm = two_component_gmm()
        rng = make_rng(17)
        x = np.array([[0.1, 0.6, 1.1], [0.2, 0.4, -0.1]])
        t = 0.5
        samples = gmm.sample(200_000, rng)
        log_lik = -0.5 * np.sum((x.reshape(-1) - t * samples) ** 2, axis=1) / (1 - t) ** 2
        w = np.exp(log_lik - log_lik.max())
        estimate = (w @ samples) / w.sum()
        _, mean = gmm_posterior(gmm, x, t)
        assert_allclose(mean.reshape(-1), estimate, atol=0.02)

    def test_marginal_field_from_posterior_mean(self):
        gmm = two_component_gmm()
        tau = Path(make_rng(2).normal(size=(2, 3)))
        field = GmmMarginalField(gmm)
        assert_allclose(gmm_marginal(gmm, tau, 0.3).data, field.velocity(tau.data, 0.3))

    def test_translation_equivariance(self):
        shift = np.array([[3.0], [-2.0]]) * np.ones((2, 3))
        x = make_rng(4).normal(size=(2, 3))
        base = GmmMarginalField(two_component_gmm())
        moved = GmmMarginalField(two_component_gmm(shift), prior_mean=shift)
        for t in (0.0, 0.3, 0.8):
            assert_allclose(moved.posterior_mean(x + shift, t), base.posterior_mean(x, t) + shift, atol=1e-12)
            assert_allclose(moved.velocity(x + shift, t), base.velocity(x, t), atol=1e-10)

    def test_posterior_mean_finite_at_one(self):
        field = GmmMarginalField(two_component_gmm())
        assert np.all(np.isfinite(field.posterior_mean(np.zeros((2, 3)), 1.0)))
        with pytest.raises(SingularityError):
            field.velocity(np.zeros((2, 3)), 1.0)

    def test_invalid_mixtures(self):
        with pytest.raises(ValidationError):
            GmmTarget(weights=np.array([0.5, 0.6]), means=np.zeros((2, 1, 2)), stds=np.ones(2))
        with pytest.raises(ValidationError):
            GmmTarget(weights=np.array([1.0]), means=np.zeros((1, 1, 2)), stds=np.zeros(1))

    def test_dict_round_trip(self):
        gmm = two_component_gmm()
        restored = GmmTarget.from_dict(gmm.to_dict())
        assert np.array_equal(restored.means, gmm.means)
        assert np.array_equal(restored.weights, gmm.weights)


class TestMlp:

    def test_gradient_check(self):
        rng = make_rng(8)
        model = MlpField([2, 4, 2], rng)
        inputs = rng.normal(size=(16, 2))
        targets = rng.normal(size=(16, 2))
        _, grads = model.loss_and_gradients(inputs, targets)
        h = 1e-6
        for param, grad in zip(model.parameters(), grads):
            numeric = np.zeros_like(param)
            for idx in np.ndindex(param.shape):
                saved = param[idx]
                param[idx] = saved + h
                up, _ = model.loss_and_gradients(inputs, targets)
                param[idx] = saved - h
                down, _ = model.loss_and_gradients(inputs, targets)
                param[idx] = saved
                numeric[idx] = (up - down) / (2 * h)
            rel = np.linalg.norm(numeric - grad) / (np.linalg.norm(numeric) + np.linalg.norm(grad) + 1e-12)
            assert rel < 1e-4

    def test_widths_must_match_paths(self):
        with pytest.raises(ValidationError):
            MlpField([5, 8, 4], make_rng(0), path_shape=(2, 2))

    def test_adam_reduces_loss_on_fixed_batch(self):
        rng = make_rng(3)
        model = MlpField([3, 16, 2], rng)
        inputs = rng.normal(size=(32, 3))
        targets = np.tanh(inputs[:, :2])
        first, _ = model.loss_and_gradients(inputs, targets)
        for _ in range(200):
            _, grads = model.loss_and_gradients(inputs, targets)
            model.adam_update(grads, 1e-2)
        last, _ = model.loss_and_gradients(inputs, targets)
        assert last < 0.5 * first
        assert model.step_count == 200

    def test_checkpoint_round_trip_resumes_identically(self):
        gmm = two_component_gmm()
        model = MlpField.for_paths(2, 2, [8], make_rng(1))
        cfm_train_step(model, gmm, 8, 1e-3)
        clone = MlpField.from_dict(model.to_dict())
        x = np.ones((2, 3))
        assert_allclose(clone.velocity(x, 0.3), model.velocity(x, 0.3), rtol=0, atol=0)
        a = cfm_train_step(model, gmm, 8, 1e-3)
        b = cfm_train_step(clone, gmm, 8, 1e-3)
        assert a.value == b.value
        assert all(np.array_equal(p, q) for p, q in zip(model.parameters(), clone.parameters()))

    def test_divergence_is_reported(self):
        model = MlpField.for_paths(2, 2, [4], make_rng(1))
        model.weights[0][0, 0] = np.nan
        with pytest.raises(TrainingDivergedError):
            cfm_train_step(model, two_component_gmm(), 4, 1e-3)

    def test_cfm_batch_shapes(self):
        inputs, targets = cfm_batch(two_component_gmm(), 10, make_rng(0))
        assert inputs.shape == (10, 7)
        assert targets.shape == (10, 6)
        assert np.all((inputs[:, -1] >= 0) & (inputs[:, -1] < 1))


class TestFieldDistance:

    def test_zero_against_itself(self):
        gmm = two_component_gmm()
        probes = sample_probes(gmm, 32, make_rng(0))
        field = GmmMarginalField(gmm)
        assert field_distance(field, field, probes) == 0.0
        assert all(t < 0.9 for _, t in probes)

    def test_constant_offset(self):
        probes = sample_probes(two_component_gmm(), 16, make_rng(1))
        zero = CallableField(lambda x, t: np.zeros_like(x))
        one = CallableField(lambda x, t: np.ones_like(x))
        assert field_distance(zero, one, probes) == pytest.approx(np.sqrt(6.0))

    def test_needs_probes(self):
        field = GmmMarginalField(two_component_gmm())
        with pytest.raises(ValidationError):
            field_distance(field, field, [])


def test_smoothed_trailing_average():
    assert_allclose(smoothed([1.0, 2.0, 3.0, 4.0], window=2), [1.5, 2.5, 3.5])
    assert smoothed([], window=5).size == 0
