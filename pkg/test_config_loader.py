import logging

import pytest
import yaml

from errors import ConfigError
from utils.config_loader import (apply_overrides, config_hash, dump_effective_config, get_config_value, load_config,
                                 validate_config)
from utils.logging_setup import setup_logging


class TestLoadConfig:
    def test_example_config_is_valid(self, example_config):
        assert validate_config(example_config) is example_config
        assert get_config_value(example_config, 'codec', 't0') == 4
        assert get_config_value(example_config, 'full_scale', 'step_bits') == 512

    def test_config_yaml_takes_precedence(self, tmp_path):
        (tmp_path / 'example_config.yaml').write_text('experiment: {seed: 1}\n')
        (tmp_path / 'config.yaml').write_text('experiment: {seed: 2}\n')
        assert load_config(str(tmp_path))['experiment']['seed'] == 2

    def test_falls_back_to_example(self, tmp_path):
        (tmp_path / 'example_config.yaml').write_text('experiment: {seed: 1}\n')
        assert load_config(str(tmp_path))['experiment']['seed'] == 1

    def test_missing_directory(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / 'nowhere'))

    def test_non_mapping_rejected(self, tmp_path):
        (tmp_path / 'config.yaml').write_text('- just\n- a list\n')
        with pytest.raises(ConfigError):
            load_config(str(tmp_path))

    def test_get_config_value_default(self):
        config = {'a': {'b': 1}}
        assert get_config_value(config, 'a', 'b') == 1
        assert get_config_value(config, 'a', 'c', default=5) == 5
        assert get_config_value(config, 'a', 'b', 'c', default=None) is None


class TestOverrides:
    def test_values_are_typed(self, example_config):
        result = apply_overrides(example_config, ['codec.t0=3', 'sweep.bers=[0.0, 0.1]', 'baseline.fec=repetition-3'])
        assert result['codec']['t0'] == 3
        assert result['sweep']['bers'] == [0.0, 0.1]
        assert result['baseline']['fec'] == 'repetition-3'
        assert example_config['codec']['t0'] == 4

    def test_new_sections_are_created(self):
        assert apply_overrides({}, ['paths.data=/tmp/x']) == {'paths': {'data': '/tmp/x'}}

    @pytest.mark.parametrize('item', ['codec.t0', '=3'])
    def test_malformed_override(self, item):
        with pytest.raises(ConfigError):
            apply_overrides({}, [item])


class TestValidation:
    @pytest.mark.parametrize('override, key', [
        ('codec.t0=8', 'codec.t0'),
        ('codec.payload_shape=[2, 2, 2]', 'codec.payload_shape'),
        ('sweep.bers=[0.1, 0.6]', 'sweep.bers'),
        ('sweep.bers=[]', 'sweep.bers'),
        ('baseline.fec=ldpc', 'baseline.fec'),
        ('harq.thetas=[1.2]', 'harq.thetas'),
        ('codec.encoder_reset=none', 'codec.encoder_reset'),
        ('simnet.prior_shape=[8, 2, 2]', 'simnet.prior_shape'),
        ('dataset.image_size=10', 'backbone.split_shape'),
        ('experiment.seed=-1', 'experiment.seed'),
        ('baseline.budget_factor=0.5', 'baseline.budget_factor'),
        ('codec.entropy_weight=-1.0', 'codec.entropy_weight'),
    ])
    def test_rejects_bad_values(self, example_config, override, key):
        with pytest.raises(ConfigError) as excinfo:
            validate_config(apply_overrides(example_config, [override]))
        assert excinfo.value.key == key

    def test_tiny_config_is_valid(self, tiny_config):
        validate_config(tiny_config)


class TestConfigHash:
    def test_model_sections_change_the_hash(self, example_config):
        base = config_hash(example_config)
        assert len(base) == 32
        assert config_hash(apply_overrides(example_config, ['codec.t0=3'])) != base
        assert config_hash(apply_overrides(example_config, ['experiment.seed=8'])) != base

    def test_evaluation_sections_do_not(self, example_config):
        base = config_hash(example_config)
        assert config_hash(apply_overrides(example_config, ['logging.level=DEBUG', 'sweep.seeds=[0]'])) == base

    def test_dump_round_trips(self, example_config):
        assert yaml.safe_load(dump_effective_config(example_config)) == example_config


def test_setup_logging_writes_to_directory(tmp_path):
    config = {'logging': {'directory': str(tmp_path / 'logs'), 'level': 'DEBUG', 'retention_days': 2}}
    logger = setup_logging(config, name='unit')
    logger.info('hello')
    for handler in logging.getLogger().handlers:
        handler.flush()
    assert 'hello' in (tmp_path / 'logs' / 'unit.log').read_text()
    logging.getLogger().handlers = []
