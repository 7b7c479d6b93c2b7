import copy

import numpy as np
import pytest
import yaml

from backbone import BackboneConfig, init_backbone
from codec import CodecConfig, init_codec
from harq import HarqModels
from simnet import SimNetConfig, init_simnet
from utils.config_loader import load_config


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains toy models end to end (deselect with -m 'not slow')")


@pytest.fixture
def example_config():
    return load_config()


def tiny_overrides(config, tmp_path):
    """Shrink every stage so the whole pipeline runs in well under a minute."""
    config = copy.deepcopy(config)
    config['logging']['directory'] = str(tmp_path / 'logs')
    config['paths'] = dict(checkpoints=str(tmp_path / 'checkpoints'), data=str(tmp_path / 'data'),
                           results_db=str(tmp_path / 'results' / 'results.db'),
                           report_dir=str(tmp_path / 'results' / 'report'))
    config['dataset'].update(num_classes=4, train_size=256, test_size=64)
    config['optimizer']['batch_size'] = 32
    config['backbone'].update(hidden_channels=4, split_shape=[4, 4, 4], epochs=1)
    config['codec'].update(t0=2, T=4, payload_shape=[2, 4, 4], hidden_channels=4,
                           reconstructor_channels=2, epochs=1, finetune_epochs=1)
    config['simnet'].update(prior_shape=[4, 1, 1], hidden_channels=4, hidden_units=8, epochs=1)
    config['harq'].update(gap_bers=[0.0, 0.2], samples=16)
    config['sweep'].update(bers=[0.0, 0.1, 0.2, 0.3], seeds=[0, 1], samples_per_cell=16)
    config['baseline'].update(fixed_steps=2, epochs=1, samples=16, bers=[0.0, 0.3])
    return config


@pytest.fixture
def tiny_config(example_config, tmp_path):
    return tiny_overrides(example_config, tmp_path)


@pytest.fixture
def tiny_config_dir(tiny_config, tmp_path):
    config_dir = tmp_path / 'config'
    config_dir.mkdir()
    with open(config_dir / 'config.yaml', 'w') as f:
        yaml.safe_dump(tiny_config, f)
    return config_dir


def build_models(feature_shape=(4, 4, 4), payload_shape=(2, 4, 4), prior_shape=(4, 1, 1), t0=2, T=4,
                 num_classes=4, reconstructor_channels=2, seed=0):
    """Untrained models; the task head gets a random bias so logits never vanish."""
    backbone_cfg = BackboneConfig(num_classes=num_classes, image_size=2 * feature_shape[1],
                                  hidden_channels=4, split_shape=tuple(feature_shape))
    params = init_backbone(backbone_cfg, seed)
    rng = np.random.default_rng(seed)
    params['lambda']['fc.bias'].data = rng.normal(0.0, 1.0, size=num_classes)
    codec_cfg = CodecConfig(t0=t0, T=T, payload_shape=payload_shape, feature_shape=feature_shape,
                            hidden_channels=4, reconstructor_channels=reconstructor_channels)
    init_codec(codec_cfg, seed, params)
    sim_cfg = SimNetConfig(prior_shape=prior_shape, feature_shape=feature_shape, hidden_channels=4, hidden_units=8)
    init_simnet(sim_cfg, seed, params)
    return HarqModels(params=params, codec=codec_cfg, simnet=sim_cfg)


@pytest.fixture
def tiny_models():
    return build_models()


@pytest.fixture
def tiny_features():
    return np.random.default_rng(11).normal(0.0, 1.0, size=(12, 4, 4, 4))
