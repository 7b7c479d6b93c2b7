import logging
import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from backbone import BackboneConfig, init_backbone
from checkpoints import MAGIC, ModelParams, deserialize, load_checkpoint, save_checkpoint, serialize
from errors import CheckpointError
from tensor_core import ParamGroup

CFG_HASH = bytes(range(32))


@pytest.fixture
def params():
    params = init_backbone(BackboneConfig(num_classes=4, hidden_channels=4, split_shape=(4, 4, 4)), seed=3)
    scalar = params.add(ParamGroup('phi'))
    scalar.add('offset', np.array(0.25))
    return params


def assert_same_params(a: ModelParams, b: ModelParams):
    assert [g.tag for g in a.ordered()] == [g.tag for g in b.ordered()]
    for group in a.ordered():
        other = b[group.tag]
        assert list(dict(group.items())) == list(dict(other.items()))
        for layer_id, tensor in group.items():
            assert other[layer_id].shape == tensor.shape
            assert_array_equal(other[layer_id].data, tensor.data)


class TestContainer:
    def test_round_trip_is_bit_exact(self, params):
        restored, cfg_hash = deserialize(serialize(params, CFG_HASH))
        assert cfg_hash == CFG_HASH
        assert_same_params(params, restored)
        assert restored.checksums() == params.checksums()

    def test_header_layout(self, params):
        blob = serialize(params, CFG_HASH)
        assert blob[:4] == MAGIC
        assert struct.unpack('<H', blob[4:6]) == (1,)
        assert blob[6:38] == CFG_HASH
        assert struct.unpack('<H', blob[38:40]) == (3,)

    def test_bad_magic(self, params):
        blob = serialize(params, CFG_HASH)
        with pytest.raises(CheckpointError, match='magic'):
            deserialize(b'XXXX' + blob[4:])

    def test_truncated(self, params):
        blob = serialize(params, CFG_HASH)
        with pytest.raises(CheckpointError, match='truncated'):
            deserialize(blob[:-3])

    def test_trailing_bytes(self, params):
        with pytest.raises(CheckpointError, match='trailing'):
            deserialize(serialize(params, CFG_HASH) + b'\x00')

    def test_unsupported_version(self, params):
        blob = bytearray(serialize(params, CFG_HASH))
        blob[4:6] = struct.pack('<H', 9)
        with pytest.raises(CheckpointError, match='version'):
            deserialize(bytes(blob))


class TestFiles:
    def test_save_then_load(self, params, tmp_path):
        path = tmp_path / 'nested' / 'backbone.ckpt'
        save_checkpoint(str(path), params, CFG_HASH)
        assert_same_params(params, load_checkpoint(str(path), CFG_HASH))
        assert not (tmp_path / 'nested' / 'backbone.ckpt.tmp').exists()

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match='missing'):
            load_checkpoint(str(tmp_path / 'codec.ckpt'))

    def test_config_mismatch_only_warns(self, params, tmp_path, caplog):
        path = str(tmp_path / 'simnet.ckpt')
        save_checkpoint(path, params, CFG_HASH)
        with caplog.at_level(logging.WARNING):
            restored = load_checkpoint(path, bytes(32))
        assert 'different configuration' in caplog.text
        assert_same_params(params, restored)


class TestModelParams:
    def test_freeze_and_select(self, params):
        params.freeze(['mu'])
        assert all(not t.requires_grad for _, t in params['mu'].items())
        assert all(t.requires_grad for _, t in params['lambda'].items())
        assert [g.tag for g in params.select(['lambda', 'mu'])] == ['lambda', 'mu']

    def test_ordered_follows_group_tags(self):
        params = ModelParams()
        for tag in ('phi', 'mu', 'gamma'):
            params.add(ParamGroup(tag))
        assert [g.tag for g in params.ordered()] == ['mu', 'gamma', 'phi']
