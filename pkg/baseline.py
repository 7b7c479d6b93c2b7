"""
Separate source/channel coding baseline: a fixed-rate codec whose payload
is split into chunks, each protected by CRC-16 and a small FEC, and repaired
by Type-I HARQ retransmissions of whole chunks until every CRC passes or the
bit budget runs out. Once the FEC is overwhelmed the CRC keeps failing and
accuracy falls off a cliff.
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from backbone import execute_task
from channel import BitStream, ChannelModel, bsc_transmit
from checkpoints import ModelParams
from codec import CodecConfig, decode_payload, encode_payload
from errors import ConfigError, ShapeError
from snn_neurons import SpikeTensor
from tensor_core import Tensor, no_grad
from utils.config_loader import FEC_KINDS, get_config_value

logger = logging.getLogger(__name__)

CRC_POLY = 0x1021
CRC_INIT = 0xFFFF
CRC_BITS = 16

# Systematic Hamming(7,4): codeword = d1 d2 d3 d4 p1 p2 p3
_HAMMING_P = np.array([[1, 1, 0],
                       [1, 0, 1],
                       [0, 1, 1],
                       [1, 1, 1]], dtype=np.uint8)
_HAMMING_G = np.hstack([np.eye(4, dtype=np.uint8), _HAMMING_P])
_HAMMING_H = np.hstack([_HAMMING_P.T, np.eye(3, dtype=np.uint8)])
# syndrome value (s1*4 + s2*2 + s3) -> flipped position, -1 for "no error"
_SYNDROME_POSITION = np.full(8, -1, dtype=np.int64)
for _pos in range(7):
    _col = _HAMMING_H[:, _pos]
    _SYNDROME_POSITION[_col[0] * 4 + _col[1] * 2 + _col[2]] = _pos


def crc16(bits) -> int:
    """CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF, no reflection, no final xor) over a bit sequence, MSB first."""
    reg = CRC_INIT
    for bit in np.asarray(bits, dtype=np.uint8).reshape(-1):
        feedback = ((reg >> 15) & 1) ^ int(bit)
        reg = (reg << 1) & 0xFFFF
        if feedback:
            reg ^= CRC_POLY
    return reg


def _crc_bits(value):
    return np.array([(value >> (CRC_BITS - 1 - i)) & 1 for i in range(CRC_BITS)], dtype=np.uint8)


def crc_attach(payload: BitStream) -> BitStream:
    bits = payload.to_bits()
    return BitStream.from_bits(np.concatenate([bits, _crc_bits(crc16(bits))]))


def crc_check(stream: BitStream) -> bool:
    """True iff the stream (payload followed by its CRC) leaves a zero residue."""
    if stream.length < CRC_BITS:
        return False
    return crc16(stream.to_bits()) == 0


@dataclass(frozen=True)
class FecScheme:
    kind: str

    def __post_init__(self):
        if self.kind not in FEC_KINDS:
            raise ConfigError('baseline.fec', f"expected one of {FEC_KINDS}, got {self.kind!r}")

    @property
    def rate(self):
        return 1.0 / 3.0 if self.kind == 'repetition-3' else 4.0 / 7.0

    def encoded_length(self, length):
        if self.kind == 'repetition-3':
            return 3 * length
        return 7 * ((length + 3) // 4)


def fec_encode(bits, scheme: FecScheme):
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    if scheme.kind == 'repetition-3':
        return np.repeat(bits, 3)
    padded = np.concatenate([bits, np.zeros((-len(bits)) % 4, dtype=np.uint8)])
    return (padded.reshape(-1, 4) @ _HAMMING_G % 2).astype(np.uint8).reshape(-1)


def fec_decode(bits, scheme: FecScheme, length):
    """Decode back to `length` data bits: majority vote, or single-error correction per 7-bit block."""
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    if len(bits) != scheme.encoded_length(length):
        raise ShapeError('fec_decode', (len(bits),), (scheme.encoded_length(length),))
    if scheme.kind == 'repetition-3':
        return (bits.reshape(-1, 3).sum(axis=1) >= 2).astype(np.uint8)
    blocks = bits.reshape(-1, 7).copy()
    syndrome = blocks @ _HAMMING_H.T % 2
    position = _SYNDROME_POSITION[syndrome[:, 0] * 4 + syndrome[:, 1] * 2 + syndrome[:, 2]]
    rows = np.nonzero(position >= 0)[0]
    blocks[rows, position[rows]] ^= 1
    return blocks[:, :4].reshape(-1)[:length]


@dataclass
class BaselineConfig:
    fec: FecScheme
    num_chunks: int = 2
    budget_factor: float = 2.0

    def __post_init__(self):
        if self.num_chunks < 1:
            raise ConfigError('baseline.num_chunks', f"need at least one chunk, got {self.num_chunks}")
        if self.budget_factor < 1.0:
            raise ConfigError('baseline.budget_factor', f"budget must cover the first transmission, got {self.budget_factor}")

    @classmethod
    def from_config(cls, config):
        return cls(fec=FecScheme(get_config_value(config, 'baseline', 'fec', default='hamming-7-4')),
                   num_chunks=get_config_value(config, 'baseline', 'num_chunks', default=2),
                   budget_factor=float(get_config_value(config, 'baseline', 'budget_factor', default=2.0)))


@dataclass
class BaselineModels:
    params: ModelParams     # lambda plus the fixed-rate alpha, beta, gamma
    codec: CodecConfig


@dataclass
class BaselineRound:
    round: int
    chunks: List[int]
    bits: int
    crc_ok: List[bool]


@dataclass
class BaselineSession:
    rounds: List[BaselineRound]
    total_bits: int
    initial_bits: int
    budget_bits: int
    success: bool
    final_prediction: int
    ber: float
    session: int = 0
    decoded_bits: np.ndarray = field(default=None, repr=False)


def chunk_lengths(payload_bits, num_chunks):
    if num_chunks > payload_bits:
        raise ConfigError('baseline.num_chunks', f"{num_chunks} chunks for a {payload_bits}-bit payload")
    return [len(part) for part in np.array_split(np.arange(payload_bits), num_chunks)]


def _transfer(payload_bits, ch: ChannelModel, cfg: BaselineConfig):
    """CRC/FEC/retransmission loop for one payload -> (decoded, rounds, used, initial, budget, success)."""
    lengths = chunk_lengths(len(payload_bits), cfg.num_chunks)
    bounds = np.cumsum([0] + lengths)
    blocks = [fec_encode(crc_attach(BitStream.from_bits(payload_bits[bounds[i]:bounds[i + 1]])).to_bits(), cfg.fec)
              for i in range(cfg.num_chunks)]
    initial_bits = sum(len(b) for b in blocks)
    budget = int(round(cfg.budget_factor * initial_bits))

    decoded = [None] * cfg.num_chunks
    ok = [False] * cfg.num_chunks

    def deliver(round_index, chunks):
        sent = np.concatenate([blocks[i] for i in chunks])
        received = bsc_transmit(BitStream.from_bits(sent), ch.at_round(round_index)).to_bits()
        offset = 0
        for i in chunks:
            coded = received[offset:offset + len(blocks[i])]
            offset += len(blocks[i])
            with_crc = fec_decode(coded, cfg.fec, lengths[i] + CRC_BITS)
            decoded[i] = with_crc[:lengths[i]]
            ok[i] = crc_check(BitStream.from_bits(with_crc))
        return BaselineRound(round=round_index, chunks=list(chunks), bits=len(sent), crc_ok=[ok[i] for i in chunks])

    rounds = [deliver(0, list(range(cfg.num_chunks)))]
    used = initial_bits
    queue = deque(i for i in range(cfg.num_chunks) if not ok[i])
    while queue:
        chunk = queue.popleft()
        if used + len(blocks[chunk]) > budget:
            break
        rounds.append(deliver(len(rounds), [chunk]))
        used += len(blocks[chunk])
        if not ok[chunk]:
            queue.append(chunk)
    return np.concatenate(decoded), rounds, used, initial_bits, budget, all(ok)


def run_baseline_sessions(features, models: BaselineModels, channels: Sequence[ChannelModel],
                          cfg: BaselineConfig, batch_size=500):
    features = np.asarray(features, dtype=np.float64)
    if len(features) != len(channels):
        raise ConfigError('baseline.channels', f"{len(features)} features but {len(channels)} channels")
    codec_cfg = models.codec
    step_shape = codec_cfg.payload_shape
    sessions = []
    with no_grad():
        for start in range(0, len(features), batch_size):
            feature = Tensor(features[start:start + batch_size])
            spikes = encode_payload(feature, models.params, codec_cfg, codec_cfg.T)
            payloads = np.stack([s.bits.reshape(feature.shape[0], -1) for s in spikes], axis=1)
            payloads = payloads.reshape(feature.shape[0], -1)
            results = [_transfer(payloads[row], channels[start + row], cfg) for row in range(feature.shape[0])]
            received = np.stack([r[0] for r in results]).reshape((feature.shape[0], codec_cfg.T) + step_shape)
            steps = [SpikeTensor.from_bits(received[:, t]) for t in range(codec_cfg.T)]
            f_prime = decode_payload(steps, models.params, codec_cfg)
            predictions = np.argmax(execute_task(f_prime, models.params['lambda']).data, axis=1)
            for row, (decoded, rounds, used, initial, budget, success) in enumerate(results):
                ch = channels[start + row]
                sessions.append(BaselineSession(rounds=rounds, total_bits=used, initial_bits=initial,
                                                budget_bits=budget, success=success,
                                                final_prediction=int(predictions[row]), ber=ch.ber,
                                                session=ch.session, decoded_bits=decoded))
    return sessions


def run_baseline_session(feature, models: BaselineModels, ch: ChannelModel, cfg: BaselineConfig) -> BaselineSession:
    """One feature (C, H, W) through the fixed-rate codec, CRC/FEC and chunk retransmission."""
    return run_baseline_sessions(np.asarray(feature)[None], models, [ch], cfg)[0]


def baseline_records(session: BaselineSession):
    """Transcript rows in the same shape as the HARQ ones; score is undefined for CRC decisions."""
    return [dict(session=session.session, ber=session.ber, theta=float('nan'), step=r.round, bits=r.bits,
                 score=float('nan'), decision='ACK' if all(r.crc_ok) else 'NACK', digest='')
            for r in session.rounds]
