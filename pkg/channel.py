"""
Binary symmetric channel, bit packing and channel statistics.

A ChannelModel names a BER and the RNG substream (seed, session, round)
that decides which bits flip, so a transcript can be replayed exactly.
"""
import logging
from dataclasses import dataclass, replace
from typing import Sequence, Union

import numpy as np

from errors import ConfigError, DomainError, ShapeError
from snn_neurons import SpikeTensor
from tensor_core import flip_bits
from utils.rng import PURPOSE_CHANNEL, substream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChannelModel:
    ber: float
    seed: int = 0
    session: int = 0
    round: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ber <= 0.5:
            raise ConfigError('channel.ber', f"BER must lie in [0, 0.5], got {self.ber}")

    def rng(self):
        return substream(PURPOSE_CHANNEL, self.seed, self.session, self.round)

    def at_round(self, round_index):
        return replace(self, round=round_index)


@dataclass(frozen=True)
class BitStream:
    """`length` bits packed MSB-first into bytes; pad bits in the last byte are zero."""
    length: int
    words: np.ndarray

    def __post_init__(self):
        if len(self.words) != (self.length + 7) // 8:
            raise ShapeError('BitStream', (len(self.words),), ((self.length + 7) // 8,))
        if self.length % 8 and len(self.words):
            pad_mask = (1 << (8 - self.length % 8)) - 1
            if int(self.words[-1]) & pad_mask:
                raise DomainError("BitStream pad bits must be zero")

    @classmethod
    def from_bits(cls, bits):
        bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
        return cls(length=len(bits), words=np.packbits(bits))

    def to_bits(self):
        return np.unpackbits(self.words, count=self.length).astype(np.uint8)

    def __len__(self):
        return self.length


def flip_mask(shape, ber, rng):
    """Boolean mask with each entry independently True with probability `ber`."""
    return rng.random(shape) < ber


def batch_flip_mask(channels: Sequence[ChannelModel], row_shape):
    """One flip mask row per channel, each drawn from that channel's own substream."""
    return np.stack([flip_mask(row_shape, ch.ber, ch.rng()) for ch in channels])


def apply_flips(spikes: SpikeTensor, mask) -> SpikeTensor:
    return SpikeTensor(flip_bits(spikes.tensor, mask))


def bsc_transmit(value: Union[SpikeTensor, BitStream], ch: ChannelModel):
    """Flip every bit independently with probability ch.ber; returns the same kind of value."""
    rng = ch.rng()
    if isinstance(value, BitStream):
        bits = value.to_bits()
        return BitStream.from_bits(bits ^ flip_mask(bits.shape, ch.ber, rng))
    return apply_flips(value, flip_mask(value.shape, ch.ber, rng))


def pack(spikes: SpikeTensor) -> BitStream:
    return BitStream.from_bits(spikes.bits.reshape(-1))


def unpack(stream: BitStream, shape) -> SpikeTensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != stream.length:
        raise ShapeError('unpack', (stream.length,), shape)
    return SpikeTensor.from_bits(stream.to_bits().reshape(shape))


def empirical_ber(a: BitStream, b: BitStream) -> float:
    if a.length != b.length:
        raise ShapeError('empirical_ber', (a.length,), (b.length,))
    if a.length == 0:
        return 0.0
    return float(np.count_nonzero(a.to_bits() != b.to_bits())) / a.length
