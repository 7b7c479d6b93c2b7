import numpy as np
import pytest
from numpy.testing import assert_array_equal

from backbone import execute_task, generate_dataset, init_backbone, BackboneConfig
from codec import (CodecConfig, CodecSession, codec_loss, decode_payload, encode_payload, entropy_regularizer,
                   evaluate_codec, joint_finetune, run_codec, sample_step_and_ber, spike_entropy, train_codec)
from conftest import build_models
from errors import ConfigError, ShapeError
from snn_neurons import SpikeTensor
from tensor_core import Tensor, finite_diff_check, no_grad, softmax_cross_entropy
from utils.training import accuracy

identity_channel = lambda step, spikes: spikes


class TestEntropyRegularizer:
    def test_spike_entropy(self):
        assert spike_entropy(SpikeTensor.from_bits([0, 1, 0, 1])) == 1.0
        assert spike_entropy(SpikeTensor.from_bits([1, 1, 1, 1])) == 0.0
        assert spike_entropy(SpikeTensor.from_bits([0, 0, 0, 0])) == 0.0

    def test_regularizer_values(self):
        assert entropy_regularizer([1.0, 1.0]) == 0.0
        assert entropy_regularizer([0.0, 0.0, 0.0]) == 1.0
        assert entropy_regularizer([1.0, 0.5]) == 0.0625

    @pytest.mark.parametrize('pattern, expected', [
        ([[1, 0], [0, 1]], 0.0),      # half ones at every step
        ([[1, 1], [1, 1]], 1.0),      # constant spikes carry no entropy
        ([[1, 0], [1, 1]], 0.25),     # one step at 1 bit, one at 0
    ])
    def test_loss_adds_regularizer_to_cross_entropy(self, pattern, expected):
        logits = Tensor(np.array([[0.2, -0.4, 1.0], [0.5, 0.1, -0.3]]))
        labels = [2, 0]
        spikes = [SpikeTensor.from_bits(np.tile(np.array(step, dtype=float).reshape(1, 2, 1, 1), (2, 1, 1, 1)))
                  for step in pattern]
        total = codec_loss(logits, labels, spikes, 2).item()
        assert total - softmax_cross_entropy(logits, labels).item() == pytest.approx(expected, abs=1e-12)

    def test_entropy_weight_scales_regularizer(self):
        logits = Tensor(np.array([[0.2, -0.4, 1.0]]))
        spikes = [SpikeTensor.from_bits(np.ones((1, 2, 1, 1))),
                  SpikeTensor.from_bits(np.array([1, 0]).reshape(1, 2, 1, 1))]
        ce = softmax_cross_entropy(logits, [2]).item()
        assert codec_loss(logits, [2], spikes, 2, entropy_weight=4.0).item() - ce == pytest.approx(1.0, abs=1e-12)
        assert codec_loss(logits, [2], spikes, 2, entropy_weight=0.0).item() == pytest.approx(ce, abs=1e-12)
        with pytest.raises(ConfigError):
            CodecConfig(entropy_weight=-0.5)

    def test_step_count_must_match(self):
        with pytest.raises(ShapeError):
            codec_loss(Tensor(np.zeros((1, 2))), [0], [SpikeTensor.from_bits(np.zeros((1, 2)))], 2)


class TestConfig:
    def test_fixed_rate_from_config(self, example_config):
        cfg = CodecConfig.from_config(example_config, fixed_rate=True)
        assert cfg.t0 == cfg.T == 3
        assert cfg.ber_range == (0.0, 0.0)
        assert list(cfg.steps) == [3]

    def test_multi_rate_needs_t0_below_T(self):
        with pytest.raises(ConfigError):
            CodecConfig(t0=4, T=4)

    def test_payload_spatial_size_must_match_feature(self):
        with pytest.raises(ConfigError):
            CodecConfig(payload_shape=(2, 2, 2), feature_shape=(16, 4, 4))

    def test_step_bits(self):
        assert CodecConfig(payload_shape=(32, 4, 4), feature_shape=(8, 4, 4)).step_bits == 512

    def test_training_draws_stay_in_range(self):
        cfg = CodecConfig()
        rng = np.random.default_rng(0)
        for _ in range(50):
            t, p = sample_step_and_ber(cfg, rng)
            assert cfg.t0 <= t <= cfg.T and 0.0 <= p <= 0.3


class TestMultiRate:
    def test_every_rate_reconstructs_feature_shape(self, tiny_models, tiny_features):
        cfg = tiny_models.codec
        feature = Tensor(tiny_features[:3])
        with no_grad():
            session = CodecSession(tiny_models.params, cfg, 3)
            for _ in range(cfg.T):
                session.step(feature, identity_channel)
            for t in cfg.steps:
                assert session.reconstruct(t).shape == feature.shape
            with pytest.raises(ShapeError):
                session.reconstruct(cfg.t0 - 1)
            with pytest.raises(ShapeError):
                session.step(feature, identity_channel)

    def test_reconstruction_ignores_later_steps(self, tiny_models, tiny_features):
        cfg = tiny_models.codec
        feature = Tensor(tiny_features[:4])
        flip_last = lambda step, spikes: SpikeTensor.from_bits(1 - spikes.bits) if step == cfg.T else spikes
        with no_grad():
            early, _ = run_codec(feature, tiny_models.params, cfg, cfg.t0, identity_channel)
            session = CodecSession(tiny_models.params, cfg, 4)
            for _ in range(cfg.T):
                session.step(feature, flip_last)
            assert_array_equal(session.reconstruct(cfg.t0).data, early.data)

    def test_payload_split_matches_full_session(self, tiny_models, tiny_features):
        cfg = tiny_models.codec
        feature = Tensor(tiny_features[:5])
        with no_grad():
            f_prime, sent = run_codec(feature, tiny_models.params, cfg, cfg.T, identity_channel)
            spikes = encode_payload(feature, tiny_models.params, cfg, cfg.T)
            rebuilt = decode_payload(spikes, tiny_models.params, cfg)
        for a, b in zip(sent, spikes):
            assert_array_equal(a.bits, b.bits)
            assert a.shape == (5,) + cfg.payload_shape
        assert_array_equal(rebuilt.data, f_prime.data)

    def test_batched_evaluation_matches_one_pass(self, tiny_models, tiny_features):
        cfg = tiny_models.codec
        labels = np.random.default_rng(2).integers(0, 4, len(tiny_features))
        batches = []
        transmit_for_batch = lambda start, stop: batches.append((start, stop)) or identity_channel
        acc = evaluate_codec(tiny_models.params, cfg, tiny_features, labels, cfg.T, transmit_for_batch, batch_size=5)
        with no_grad():
            f_prime, _ = run_codec(Tensor(tiny_features), tiny_models.params, cfg, cfg.T, identity_channel)
            logits = execute_task(f_prime, tiny_models.params['lambda']).data
        assert batches == [(0, 5), (5, 10), (10, 12)]
        assert acc == accuracy(logits, labels)


def test_codec_loss_gradient_matches_finite_differences():
    models = build_models(feature_shape=(2, 2, 2), payload_shape=(2, 2, 2), prior_shape=(2, 1, 1), t0=1, T=2,
                          num_classes=3, reconstructor_channels=1, seed=4)
    params, cfg = models.params, models.codec
    feature = Tensor(np.random.default_rng(4).normal(0.5, 1.0, size=(3, 2, 2, 2)))
    labels = [0, 1, 2]

    def loss():
        f_prime, spikes = run_codec(feature, params, cfg, 2, identity_channel)
        return codec_loss(execute_task(f_prime, params['lambda']), labels, spikes, 2)

    checked = {f"{tag}/{layer_id}": tensor for tag in ('alpha', 'beta', 'gamma')
               for layer_id, tensor in params[tag].items()}
    assert sum(t.size for t in checked.values()) <= 1000
    report = finite_diff_check(loss, checked, h=1e-5, tolerance=1e-4)
    assert report.passed, f"max rel error {report.max_rel_error}"


@pytest.mark.slow
class TestTrainingStages:
    @pytest.fixture
    def setup(self):
        dataset = generate_dataset(num_classes=4, image_size=8, train_size=128, test_size=32, seed=1)
        backbone_cfg = BackboneConfig(num_classes=4, image_size=8, hidden_channels=4, split_shape=(4, 4, 4))
        params = init_backbone(backbone_cfg, seed=1)
        cfg = CodecConfig(t0=2, T=3, payload_shape=(2, 4, 4), feature_shape=(4, 4, 4), hidden_channels=4,
                          reconstructor_channels=2)
        return dataset, params, cfg

    def test_train_codec_keeps_backbone_frozen(self, setup):
        dataset, params, cfg = setup
        before = {tag: params[tag].checksum() for tag in ('mu', 'lambda')}
        params, history = train_codec(dataset, params, cfg, seed=1, epochs=2, batch_size=32)
        assert len(history) == 2 and all(np.isfinite(history))
        assert {tag: params[tag].checksum() for tag in ('mu', 'lambda')} == before

    def test_finetune_updates_every_group(self, setup):
        dataset, params, cfg = setup
        params, _ = train_codec(dataset, params, cfg, seed=1, epochs=1, batch_size=32)
        before = params.checksums()
        params, history = joint_finetune(dataset, params, cfg, seed=1, epochs=1, batch_size=32)
        after = params.checksums()
        assert all(before[tag] != after[tag] for tag in ('mu', 'lambda', 'alpha', 'beta', 'gamma'))

    def test_training_is_deterministic(self, setup):
        dataset, _, cfg = setup
        backbone_cfg = BackboneConfig(num_classes=4, image_size=8, hidden_channels=4, split_shape=(4, 4, 4))
        runs = [train_codec(dataset, init_backbone(backbone_cfg, seed=1), cfg, seed=2, epochs=1, batch_size=32)[0]
                for _ in range(2)]
        assert runs[0].checksums() == runs[1].checksums()
