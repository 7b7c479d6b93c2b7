import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from backbone import generate_dataset
from channel import apply_flips, flip_mask
from conftest import build_models
from errors import ShapeError, StatsError
from simnet import (SimNetConfig, cosine_rows, estimate_similarity, evaluate_simnet, extract_prior,
                    prior_activations, similarity_head, simnet_inputs, train_simnet, true_similarity)
from snn_neurons import SpikeTensor
from tensor_core import Tensor, finite_diff_check, no_grad, squared_error


class TestPrior:
    def test_prior_is_binary_with_configured_shape(self, tiny_models, tiny_features):
        cfg = tiny_models.simnet
        with no_grad():
            prior = extract_prior(Tensor(tiny_features), tiny_models.params['omega'], cfg)
        assert prior.shape == (12,) + cfg.prior_shape
        assert set(np.unique(prior.bits)) <= {0, 1}
        assert cfg.prior_bits == 4

    def test_prior_bit_is_sign_of_activation(self, tiny_models, tiny_features):
        cfg = tiny_models.simnet
        with no_grad():
            activations = prior_activations(Tensor(tiny_features), tiny_models.params['omega'], cfg).data
            prior = extract_prior(Tensor(tiny_features), tiny_models.params['omega'], cfg)
        assert_array_equal(prior.bits, (activations > 0).astype(np.uint8))

    def test_feature_shape_checked(self, tiny_models):
        with pytest.raises(ShapeError):
            extract_prior(Tensor(np.zeros((2, 3, 4, 4))), tiny_models.params['omega'], tiny_models.simnet)

    def test_prior_bits(self, example_config):
        assert SimNetConfig.from_config(example_config).prior_bits == 8
        full_scale = SimNetConfig(prior_shape=(32, 1, 1), feature_shape=(2048, 4, 4))
        assert full_scale.prior_bits == example_config['full_scale']['prior_bits'] == 32


class TestEstimate:
    def test_scores_are_clamped_per_row(self, tiny_models, tiny_features):
        cfg = tiny_models.simnet
        with no_grad():
            feature = Tensor(tiny_features)
            prior = extract_prior(feature, tiny_models.params['omega'], cfg)
            scores = estimate_similarity(feature, prior, 0.1, tiny_models.params['phi'], cfg).data
        assert scores.shape == (12,)
        assert np.all((scores >= -1.0) & (scores <= 1.0))

    def test_scalar_ber_matches_per_row_ber(self, tiny_models, tiny_features):
        cfg = tiny_models.simnet
        with no_grad():
            feature = Tensor(tiny_features)
            prior = extract_prior(feature, tiny_models.params['omega'], cfg)
            scalar = estimate_similarity(feature, prior, 0.2, tiny_models.params['phi'], cfg).data
            rows = estimate_similarity(feature, prior, np.full(12, 0.2), tiny_models.params['phi'], cfg).data
        assert_array_equal(scalar, rows)

    def test_saturated_estimate_still_gives_head_gradient(self, tiny_models, tiny_features):
        cfg, phi = tiny_models.simnet, tiny_models.params['phi']
        phi['sim_d2.bias'].data = np.full(1, 50.0)
        phi.set_requires_grad(True)
        phi.zero_grad()
        feature = Tensor(tiny_features)
        with no_grad():
            prior = extract_prior(feature, tiny_models.params['omega'], cfg)
            assert_array_equal(estimate_similarity(feature, prior, 0.1, phi, cfg).data, np.ones(12))
        squared_error(similarity_head(feature, prior, 0.1, phi, cfg), np.full(12, 0.6)).backward()
        assert phi['sim_d2.bias'].grad[0] > 0
        assert np.any(phi['sim_d2.weight'].grad != 0)

    def test_inputs_normalise_reconstruction_scale(self, tiny_models, tiny_features):
        cfg = tiny_models.simnet
        with no_grad():
            prior = extract_prior(Tensor(tiny_features), tiny_models.params['omega'], cfg)
            base = simnet_inputs(Tensor(tiny_features), prior, 0.1, cfg).data
            scaled = simnet_inputs(Tensor(10.0 * tiny_features), prior, 0.1, cfg).data
        size = int(np.prod(cfg.feature_shape))
        assert base.shape == (12, size + 1 + cfg.prior_bits + 1)
        assert_allclose(scaled[:, :size], base[:, :size], atol=1e-12)
        assert_allclose(np.sqrt(np.mean(base[:, :size] ** 2, axis=1)), np.ones(12))
        assert_allclose(scaled[:, size] - base[:, size], np.full(12, np.log(10.0)))
        assert set(np.unique(base[:, size + 1:size + 1 + cfg.prior_bits])) <= {-1.0, 1.0}
        assert_array_equal(base[:, -1], np.full(12, 0.1))

    def test_prior_batch_must_match(self, tiny_models, tiny_features):
        cfg = tiny_models.simnet
        prior = SpikeTensor.from_bits(np.zeros((3,) + cfg.prior_shape))
        with pytest.raises(ShapeError):
            estimate_similarity(Tensor(tiny_features), prior, 0.0, tiny_models.params['phi'], cfg)


class TestCosine:
    def test_known_values(self):
        u = np.array([[1.0, 0.0], [1.0, 2.0], [3.0, -1.0]])
        v = np.array([[0.0, 2.0], [2.0, 4.0], [-3.0, 1.0]])
        assert_allclose(cosine_rows(u, v), [0.0, 1.0, -1.0], atol=1e-12)

    def test_zero_norm_is_an_error(self):
        with pytest.raises(StatsError):
            cosine_rows(np.zeros((1, 3)), np.ones((1, 3)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cosine_rows(np.ones((2, 3)), np.ones((3, 2)))

    def test_reconstruction_equal_to_feature_scores_one(self, tiny_models, tiny_features):
        feature = Tensor(tiny_features)
        assert_allclose(true_similarity(feature, feature, tiny_models.params['lambda']), np.ones(12))


def test_simnet_loss_gradient_matches_finite_differences():
    models = build_models(feature_shape=(2, 2, 2), payload_shape=(2, 2, 2), prior_shape=(2, 1, 1), t0=1, T=2,
                          num_classes=3, seed=6)
    params, cfg = models.params, models.simnet
    rng = np.random.default_rng(6)
    feature = Tensor(rng.normal(size=(3, 2, 2, 2)))
    f_prime = Tensor(rng.normal(size=(3, 2, 2, 2)))
    labels = np.array([0.9, 0.2, -0.4])

    def loss():
        prior = extract_prior(feature, params['omega'], cfg)
        return squared_error(similarity_head(f_prime, prior, 0.1, params['phi'], cfg), labels)

    checked = {f"{tag}/{layer_id}": tensor for tag in ('omega', 'phi') for layer_id, tensor in params[tag].items()}
    report = finite_diff_check(loss, checked, h=1e-5, tolerance=1e-4)
    assert report.passed, f"max rel error {report.max_rel_error}"


def test_noisy_prior_differs_only_in_flipped_positions(tiny_models, tiny_features):
    cfg = tiny_models.simnet
    with no_grad():
        prior = extract_prior(Tensor(tiny_features), tiny_models.params['omega'], cfg)
    mask = flip_mask(prior.shape, 0.5, np.random.default_rng(1))
    noisy = apply_flips(prior, mask)
    assert_array_equal(noisy.bits != prior.bits, mask)


@pytest.mark.slow
def test_training_touches_only_simnet_groups():
    models = build_models(seed=2)
    params = models.params
    dataset = generate_dataset(num_classes=4, image_size=8, train_size=96, test_size=32, seed=2)
    frozen = ('mu', 'lambda', 'alpha', 'beta', 'gamma')
    before = {tag: params[tag].checksum() for tag in frozen}
    params, history = train_simnet(dataset, params, models.codec, models.simnet, seed=2, epochs=2, batch_size=32)
    assert len(history) == 2 and all(np.isfinite(history))
    assert {tag: params[tag].checksum() for tag in frozen} == before

    test_features = np.random.default_rng(2).normal(size=(20, 4, 4, 4))
    estimates, truths, bers = evaluate_simnet(params, models.codec, models.simnet, test_features, seed=2,
                                              batch_size=8)
    assert estimates.shape == truths.shape == bers.shape == (20,)
    assert np.all(np.abs(estimates) <= 1.0) and np.all(np.abs(truths) <= 1.0)
