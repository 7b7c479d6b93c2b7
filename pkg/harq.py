"""
SNN-SC-HARQ protocol engine.

Per feature the transmitter first sends the 1-bit prior K (channel round 0),
then t0 codec steps. After every step from t0 on, the receiver rebuilds F',
scores it with SimNet_D and answers ACK when the score exceeds theta. Each
NACK buys one more step (channel round t) until T is reached. Feedback is
error-free and not counted as bandwidth.

run_session plays this dialogue for one feature. run_sessions evaluates many
features at once and records the score after every step up to T; because a
score never depends on later steps, transcripts_for_theta can replay the
dialogue for any threshold from the same numbers.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from backbone import execute_task
from channel import ChannelModel, apply_flips, batch_flip_mask, bsc_transmit
from checkpoints import ModelParams
from codec import CodecConfig, CodecSession
from errors import ConfigError
from simnet import SimNetConfig, cosine_rows, estimate_similarity, extract_prior
from tensor_core import Tensor, no_grad
from utils.config_loader import get_config_value

logger = logging.getLogger(__name__)

ACK = 'ACK'
NACK = 'NACK'
MAX_STEPS = 'max-steps'
DIGEST_CHARS = 16
SESSION_BATCH = 256

# policy(t, score) -> True for ACK
Policy = Callable[[int, float], bool]


@dataclass(frozen=True)
class HarqConfig:
    t0: int
    T: int
    theta: float
    step_bits: int
    prior_bits: int

    def __post_init__(self):
        if not 1 <= self.t0 < self.T:
            raise ConfigError('harq.t0', f"need 1 <= t0 < T, got t0={self.t0}, T={self.T}")
        if not -1.0 <= self.theta <= 1.0:
            raise ConfigError('harq.theta', f"threshold must lie in [-1, 1], got {self.theta}")
        if self.step_bits <= 0 or self.prior_bits < 0:
            raise ConfigError('harq.step_bits', f"bad bit counts step={self.step_bits} prior={self.prior_bits}")

    @classmethod
    def from_config(cls, config, theta):
        codec_cfg = CodecConfig.from_config(config)
        sim_cfg = SimNetConfig.from_config(config)
        return cls(t0=codec_cfg.t0, T=codec_cfg.T, theta=float(theta),
                   step_bits=codec_cfg.step_bits, prior_bits=sim_cfg.prior_bits)

    @classmethod
    def full_scale(cls, config, theta):
        return cls(t0=get_config_value(config, 'full_scale', 't0', default=4),
                   T=get_config_value(config, 'full_scale', 'T', default=8),
                   theta=float(theta),
                   step_bits=get_config_value(config, 'full_scale', 'step_bits', default=512),
                   prior_bits=get_config_value(config, 'full_scale', 'prior_bits', default=32))


@dataclass
class HarqModels:
    params: ModelParams
    codec: CodecConfig
    simnet: SimNetConfig


@dataclass
class HarqRound:
    step: int
    sent_bits: np.ndarray
    received_bits: np.ndarray
    f_prime_digest: str
    score: float
    decision: str


@dataclass
class HarqSession:
    rounds: List[HarqRound]
    total_bits: int
    final_t: int
    final_prediction: int
    prior_bits: int
    step_bits: int
    ber: float
    session: int = 0
    theta: float = 0.0
    prior_sent: np.ndarray = field(default=None, repr=False)
    prior_received: np.ndarray = field(default=None, repr=False)

    @property
    def outcome(self):
        return ACK if self.rounds and self.rounds[-1].decision == ACK else MAX_STEPS


def decide(score, theta):
    """ACK iff the score strictly exceeds the threshold."""
    return ACK if score > theta else NACK


def threshold_policy(theta) -> Policy:
    return lambda t, score: decide(score, theta) == ACK


def bandwidth_of(session: HarqSession) -> int:
    return session.prior_bits + session.final_t * session.step_bits


def bandwidth_set(cfg: HarqConfig) -> List[int]:
    """Every bandwidth a session can end with, from t0 to T steps."""
    return [cfg.prior_bits + t * cfg.step_bits for t in range(cfg.t0, cfg.T + 1)]


def feature_digest(f_prime_row):
    return hashlib.sha256(np.ascontiguousarray(f_prime_row, dtype='<f8').tobytes()).hexdigest()[:DIGEST_CHARS]


def check_models(models: HarqModels, cfg: HarqConfig):
    if (models.codec.t0, models.codec.T) != (cfg.t0, cfg.T):
        raise ConfigError('harq.t0', f"codec runs t0={models.codec.t0}, T={models.codec.T}; "
                                     f"session wants t0={cfg.t0}, T={cfg.T}")
    if models.codec.step_bits != cfg.step_bits:
        raise ConfigError('harq.step_bits', f"{cfg.step_bits} != payload size {models.codec.step_bits}")
    if models.simnet.prior_bits != cfg.prior_bits:
        raise ConfigError('harq.prior_bits', f"{cfg.prior_bits} != prior size {models.simnet.prior_bits}")


def _round_decision(ack, t, cfg):
    if ack:
        return ACK
    return MAX_STEPS if t == cfg.T else NACK


def run_session(feature, models: HarqModels, ch: ChannelModel, cfg: HarqConfig,
                policy: Optional[Policy] = None) -> HarqSession:
    """Run the HARQ dialogue for one feature (C, H, W) over channel `ch`."""
    check_models(models, cfg)
    policy = policy or threshold_policy(cfg.theta)
    params = models.params
    feature = Tensor(np.asarray(feature.data if isinstance(feature, Tensor) else feature)[None])
    with no_grad():
        prior = extract_prior(feature, params['omega'], models.simnet)
        prior_hat = bsc_transmit(prior, ch.at_round(0))
        codec = CodecSession(params, models.codec, 1)
        transmit = lambda t, spikes: bsc_transmit(spikes, ch.at_round(t))

        rounds = []
        sent, received = [], []
        for t in range(1, cfg.T + 1):
            s_t, s_hat = codec.step(feature, transmit)
            sent.append(s_t.bits.reshape(-1))
            received.append(s_hat.bits.reshape(-1))
            if t < cfg.t0:
                continue
            f_prime = codec.reconstruct(t)
            score = float(estimate_similarity(f_prime, prior_hat, ch.ber, params['phi'], models.simnet).data[0])
            decision = _round_decision(policy(t, score), t, cfg)
            rounds.append(HarqRound(step=t, sent_bits=np.concatenate(sent), received_bits=np.concatenate(received),
                                    f_prime_digest=feature_digest(f_prime.data[0]), score=score, decision=decision))
            sent, received = [], []
            if decision != NACK:
                break
        prediction = int(np.argmax(execute_task(f_prime, params['lambda']).data[0]))

    final_t = rounds[-1].step
    session = HarqSession(rounds=rounds, total_bits=cfg.prior_bits + final_t * cfg.step_bits, final_t=final_t,
                          final_prediction=prediction, prior_bits=cfg.prior_bits, step_bits=cfg.step_bits,
                          ber=ch.ber, session=ch.session, theta=cfg.theta,
                          prior_sent=prior.bits.reshape(-1), prior_received=prior_hat.bits.reshape(-1))
    logger.debug(f"session {ch.session}: final_t={final_t} outcome={session.outcome}")
    return session


@dataclass
class SessionScores:
    """Threshold-independent record of many sessions run to T steps."""
    t0: int
    T: int
    scores: np.ndarray          # (N, T - t0 + 1)
    predictions: np.ndarray     # (N, T - t0 + 1)
    true_scores: np.ndarray     # cosine of f_T(F) and f_T(F') per step
    digests: List[List[str]]
    sent_bits: np.ndarray       # (N, T, step_bits)
    received_bits: np.ndarray
    prior_sent: np.ndarray      # (N, prior_bits)
    prior_received: np.ndarray
    bers: np.ndarray
    sessions: np.ndarray

    def __len__(self):
        return len(self.sessions)


def run_sessions(features, models: HarqModels, channels: Sequence[ChannelModel], batch_size=SESSION_BATCH):
    """Run every feature to T steps, scoring each step from t0 on."""
    features = np.asarray(features, dtype=np.float64)
    if len(features) != len(channels):
        raise ConfigError('harq.channels', f"{len(features)} features but {len(channels)} channels")
    params = models.params
    cfg = models.codec
    parts = []
    with no_grad():
        for start in range(0, len(features), batch_size):
            rows = channels[start:start + batch_size]
            feature = Tensor(features[start:start + batch_size])
            bers = np.array([ch.ber for ch in rows])
            prior = extract_prior(feature, params['omega'], models.simnet)
            prior_hat = apply_flips(prior, batch_flip_mask([ch.at_round(0) for ch in rows], prior.shape[1:]))
            codec = CodecSession(params, cfg, len(rows))
            transmit = lambda t, spikes: apply_flips(
                spikes, batch_flip_mask([ch.at_round(t) for ch in rows], spikes.shape[1:]))
            base_logits = execute_task(feature, params['lambda']).data
            scores, predictions, truths, digests = [], [], [], []
            for t in range(1, cfg.T + 1):
                codec.step(feature, transmit)
                if t < cfg.t0:
                    continue
                f_prime = codec.reconstruct(t)
                scores.append(estimate_similarity(f_prime, prior_hat, bers, params['phi'], models.simnet).data)
                logits = execute_task(f_prime, params['lambda']).data
                predictions.append(np.argmax(logits, axis=1))
                truths.append(cosine_rows(base_logits, logits))
                digests.append([feature_digest(row) for row in f_prime.data])
            parts.append(dict(
                scores=np.stack(scores, axis=1),
                predictions=np.stack(predictions, axis=1),
                true_scores=np.stack(truths, axis=1),
                digests=[list(row) for row in zip(*digests)],
                sent=np.stack([s.bits.reshape(len(rows), -1) for s in codec.sent], axis=1),
                received=np.stack([s.bits.reshape(len(rows), -1) for s in codec.received], axis=1),
                prior_sent=prior.bits.reshape(len(rows), -1),
                prior_received=prior_hat.bits.reshape(len(rows), -1),
                bers=bers,
                sessions=np.array([ch.session for ch in rows]),
            ))
    return SessionScores(
        t0=cfg.t0, T=cfg.T,
        scores=np.concatenate([p['scores'] for p in parts]),
        predictions=np.concatenate([p['predictions'] for p in parts]),
        true_scores=np.concatenate([p['true_scores'] for p in parts]),
        digests=[row for p in parts for row in p['digests']],
        sent_bits=np.concatenate([p['sent'] for p in parts]),
        received_bits=np.concatenate([p['received'] for p in parts]),
        prior_sent=np.concatenate([p['prior_sent'] for p in parts]),
        prior_received=np.concatenate([p['prior_received'] for p in parts]),
        bers=np.concatenate([p['bers'] for p in parts]),
        sessions=np.concatenate([p['sessions'] for p in parts]),
    )


def final_steps(scores: SessionScores, theta) -> np.ndarray:
    """Vectorised final_t under the threshold rule: first step scoring above theta, else T."""
    acked = scores.scores > theta
    first = np.argmax(acked, axis=1)
    return np.where(acked.any(axis=1), scores.t0 + first, scores.T)


def transcripts_for_theta(scores: SessionScores, cfg: HarqConfig, policy: Optional[Policy] = None):
    """Replay the HARQ dialogue of every recorded session under `cfg.theta` (or `policy`)."""
    if (scores.t0, scores.T) != (cfg.t0, cfg.T):
        raise ConfigError('harq.t0', f"scores cover t0={scores.t0}..T={scores.T}, config wants {cfg.t0}..{cfg.T}")
    policy = policy or threshold_policy(cfg.theta)
    sessions = []
    for i in range(len(scores)):
        rounds = []
        for t in range(cfg.t0, cfg.T + 1):
            col = t - cfg.t0
            first = 0 if t == cfg.t0 else t - 1
            score = float(scores.scores[i, col])
            decision = _round_decision(policy(t, score), t, cfg)
            rounds.append(HarqRound(step=t, sent_bits=scores.sent_bits[i, first:t].reshape(-1),
                                    received_bits=scores.received_bits[i, first:t].reshape(-1),
                                    f_prime_digest=scores.digests[i][col], score=score, decision=decision))
            if decision != NACK:
                break
        final_t = rounds[-1].step
        sessions.append(HarqSession(
            rounds=rounds, total_bits=cfg.prior_bits + final_t * cfg.step_bits, final_t=final_t,
            final_prediction=int(scores.predictions[i, final_t - cfg.t0]), prior_bits=cfg.prior_bits,
            step_bits=cfg.step_bits, ber=float(scores.bers[i]), session=int(scores.sessions[i]),
            theta=cfg.theta, prior_sent=scores.prior_sent[i], prior_received=scores.prior_received[i]))
    return sessions


def transcript_records(session: HarqSession):
    """One dict per round: session, ber, theta, step, bits, score, decision."""
    return [dict(session=session.session, ber=session.ber, theta=session.theta, step=r.step,
                 bits=int(len(r.sent_bits)), score=r.score, decision=r.decision, digest=r.f_prime_digest)
            for r in session.rounds]


def transcript_lines(session: HarqSession):
    """Line-oriented log form of a transcript, one round per line."""
    return [f"{rec['session']}\t{rec['ber']:.4f}\t{rec['theta']:.4f}\t{rec['step']}\t{rec['bits']}\t"
            f"{rec['score']:.6f}\t{rec['decision']}" for rec in transcript_records(session)]
