"""
Multi-rate spiking semantic codec.

    encoder E (alpha):        F -> conv1x1 -> ReLU -> conv1x1 -> IF layer -> S_t
    reconstructor R (beta):   S^_t -> conv1x1 -> [IF head -> F_s^t | IHF head -> F_m^t]
    converter C (gamma):      (F_s^1, F_m^1, ..., F_s^t, F_m^t, zeros up to T) -> dense -> F'

The encoder and both reconstructor heads keep their membranes across the
steps of one session, so every extra step refines the same reconstruction.
One parameter set serves every t in [t0, T].
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from backbone import execute_task, extract_features
from channel import apply_flips, flip_mask
from errors import ConfigError, ShapeError
from snn_neurons import NeuronState, SpikeTensor, if_step, ihf_step
from tensor_core import (Adam, ParamGroup, Tensor, add, binary_entropy, concat, conv_block, dense_block, flatten,
                         mean, no_grad, relu, reshape, scale, softmax_cross_entropy, squared_error, take_channels,
                         zero_pad)
from utils.config_loader import get_config_value
from utils.rng import PURPOSE_INIT, PURPOSE_TRAIN, name_tag, substream
from utils.training import accuracy, run_epochs

logger = logging.getLogger(__name__)

EVAL_BATCH = 500


@dataclass
class CodecConfig:
    t0: int = 4
    T: int = 8
    payload_shape: Tuple[int, int, int] = (2, 4, 4)
    feature_shape: Tuple[int, int, int] = (16, 4, 4)
    hidden_channels: int = 16
    reconstructor_channels: int = 8
    surrogate_k: float = 4.0
    v_th: float = 1.0
    v_reset: float = 0.0
    encoder_reset: str = 'soft'
    reconstructor_reset: str = 'soft'
    ihf_reset: str = 'soft'
    ber_range: Tuple[float, float] = (0.0, 0.3)
    entropy_weight: float = 1.0
    fixed_rate: bool = False

    def __post_init__(self):
        self.payload_shape = tuple(self.payload_shape)
        self.feature_shape = tuple(self.feature_shape)
        self.ber_range = tuple(self.ber_range)
        if self.fixed_rate:
            if not 1 <= self.t0 == self.T:
                raise ConfigError('codec.t0', f"fixed-rate codec needs 1 <= t0 == T, got t0={self.t0}, T={self.T}")
        elif not 1 <= self.t0 < self.T:
            raise ConfigError('codec.t0', f"need 1 <= t0 < T, got t0={self.t0}, T={self.T}")
        if self.payload_shape[1:] != self.feature_shape[1:]:
            raise ConfigError('codec.payload_shape',
                              f"spatial size {self.payload_shape[1:]} differs from feature {self.feature_shape[1:]}")
        low, high = self.ber_range
        if not 0.0 <= low <= high <= 0.5:
            raise ConfigError('codec.ber_range', f"expected 0 <= low <= high <= 0.5, got {self.ber_range}")
        if self.entropy_weight < 0:
            raise ConfigError('codec.entropy_weight', f"expected a non-negative weight, got {self.entropy_weight}")

    @property
    def step_bits(self):
        return int(np.prod(self.payload_shape))

    @property
    def steps(self):
        return range(self.t0, self.T + 1)

    @classmethod
    def from_config(cls, config, fixed_rate=False):
        section = lambda key, default=None: get_config_value(config, 'codec', key, default=default)
        kwargs = dict(
            t0=section('t0', 4),
            T=section('T', 8),
            payload_shape=tuple(section('payload_shape', [2, 4, 4])),
            feature_shape=tuple(get_config_value(config, 'backbone', 'split_shape', default=[16, 4, 4])),
            hidden_channels=section('hidden_channels', 16),
            reconstructor_channels=section('reconstructor_channels', 8),
            surrogate_k=float(section('surrogate_k', 4.0)),
            v_th=float(section('v_th', 1.0)),
            v_reset=float(section('v_reset', 0.0)),
            encoder_reset=section('encoder_reset', 'soft'),
            reconstructor_reset=section('reconstructor_reset', 'soft'),
            ihf_reset=section('ihf_reset', 'soft'),
            ber_range=tuple(section('ber_range', [0.0, 0.3])),
            entropy_weight=float(section('entropy_weight', 1.0)),
        )
        if fixed_rate:
            steps = get_config_value(config, 'baseline', 'fixed_steps', default=3)
            kwargs.update(t0=steps, T=steps, ber_range=(0.0, 0.0), fixed_rate=True)
        return cls(**kwargs)


@dataclass(frozen=True)
class EncoderState:
    neurons: NeuronState


@dataclass(frozen=True)
class ReconstructorState:
    spike_head: NeuronState
    membrane_head: NeuronState


@dataclass
class StepOutputs:
    """Per-step (F_s^t, F_m^t) pairs in transmission order."""
    pairs: List[Tuple[Tensor, Tensor]] = field(default_factory=list)

    def append(self, f_s, f_m):
        self.pairs.append((f_s, f_m))

    def __len__(self):
        return len(self.pairs)


def init_codec(cfg: CodecConfig, seed, params):
    """Add fresh alpha, beta and gamma groups to `params`."""
    rng = substream(PURPOSE_INIT, seed, name_tag('codec-fixed' if cfg.fixed_rate else 'codec'))
    channels, height, width = cfg.feature_shape
    alpha = ParamGroup('alpha')
    alpha.add_conv('enc1', channels, cfg.hidden_channels, 1, rng)
    alpha.add_conv('enc2', cfg.hidden_channels, cfg.payload_shape[0], 1, rng)
    beta = ParamGroup('beta')
    beta.add_conv('rec', cfg.payload_shape[0], 2 * cfg.reconstructor_channels, 1, rng)
    gamma = ParamGroup('gamma')
    in_features = 2 * cfg.reconstructor_channels * cfg.T * height * width
    gamma.add_linear('converter', in_features, channels * height * width, rng)
    for group in (alpha, beta, gamma):
        params.add(group)
    return params


def init_encoder_state(cfg: CodecConfig, batch_size):
    return EncoderState(NeuronState.zeros((batch_size,) + cfg.payload_shape, kind='IF',
                                          reset_mode=cfg.encoder_reset, v_th=cfg.v_th, v_reset=cfg.v_reset))


def init_reconstructor_state(cfg: CodecConfig, batch_size):
    head_shape = (batch_size, cfg.reconstructor_channels) + cfg.payload_shape[1:]
    return ReconstructorState(
        spike_head=NeuronState.zeros(head_shape, kind='IF', reset_mode=cfg.reconstructor_reset,
                                     v_th=cfg.v_th, v_reset=cfg.v_reset),
        membrane_head=NeuronState.zeros(head_shape, kind='IHF', reset_mode=cfg.ihf_reset,
                                        v_th=cfg.v_th, v_reset=cfg.v_reset),
    )


def encode_step(feature: Tensor, enc_state: EncoderState, alpha: ParamGroup, cfg: CodecConfig):
    """E: drive the IF output layer with the encoded feature for one step -> (S_t, state')."""
    if feature.shape[1:] != cfg.feature_shape:
        raise ShapeError('encode_step', feature.shape[1:], cfg.feature_shape)
    drive = conv_block(relu(conv_block(feature, alpha, 'enc1')), alpha, 'enc2')
    spikes, neurons = if_step(enc_state.neurons, drive, cfg.surrogate_k)
    return spikes, EncoderState(neurons)


def reconstruct_step(s_hat: SpikeTensor, rec_state: ReconstructorState, beta: ParamGroup, cfg: CodecConfig):
    """R: received bits -> (F_s^t, F_m^t, state')."""
    if s_hat.shape[1:] != cfg.payload_shape:
        raise ShapeError('reconstruct_step', s_hat.shape[1:], cfg.payload_shape)
    current = conv_block(s_hat.tensor, beta, 'rec')
    c_r = cfg.reconstructor_channels
    spikes, spike_head = if_step(rec_state.spike_head, take_channels(current, 0, c_r), cfg.surrogate_k)
    _, membrane, membrane_head = ihf_step(rec_state.membrane_head, take_channels(current, c_r, 2 * c_r),
                                          cfg.surrogate_k)
    return spikes.tensor, membrane, ReconstructorState(spike_head, membrane_head)


def convert(outputs: StepOutputs, t: int, gamma: ParamGroup, cfg: CodecConfig) -> Tensor:
    """C: concatenate the first t step pairs, zero-pad to T steps, apply the dense converter."""
    if not cfg.t0 <= t <= cfg.T:
        raise ShapeError('convert', (t,), (cfg.t0, cfg.T))
    if len(outputs) < t:
        raise ShapeError('convert', (len(outputs),), (t,))
    parts = [tensor for pair in outputs.pairs[:t] for tensor in pair]
    stacked = zero_pad(concat(parts, axis=1), 2 * cfg.reconstructor_channels * cfg.T, axis=1)
    dense = dense_block(flatten(stacked), gamma, 'converter')
    return reshape(dense, (dense.shape[0],) + cfg.feature_shape)


def spike_entropy(spikes: SpikeTensor) -> float:
    """Binary entropy (bits) of the firing frequency of a spike tensor; 0 for all-0 or all-1."""
    q = spikes.rate()
    if q <= 0.0 or q >= 1.0:
        return 0.0
    return float(-q * np.log2(q) - (1.0 - q) * np.log2(1.0 - q))


def entropy_regularizer(entropies) -> float:
    """((1/t) * sum(H_i) - 1)^2 for per-step entropies H_1..H_t."""
    entropies = list(entropies)
    return (sum(entropies) / len(entropies) - 1.0) ** 2


def codec_loss(logits: Tensor, labels, spikes: List[SpikeTensor], t: int, entropy_weight=1.0) -> Tensor:
    """
    Cross-entropy plus the spike-entropy regularizer. Entropy is taken per
    sample over each step's spike map, averaged over the t steps, and the
    squared distance from 1 bit is averaged over the batch. entropy_weight=1
    gives the plain sum.
    """
    if len(spikes) != t or t < 1:
        raise ShapeError('codec_loss', (len(spikes),), (t,))
    reduce_axes = tuple(range(1, len(spikes[0].shape)))
    total = None
    for s in spikes:
        h = binary_entropy(mean(s.tensor, axis=reduce_axes))
        total = h if total is None else add(total, h)
    mean_entropy = scale(total, 1.0 / t)
    regularizer = squared_error(mean_entropy, np.ones(mean_entropy.shape))
    if entropy_weight != 1.0:
        regularizer = scale(regularizer, float(entropy_weight))
    return add(softmax_cross_entropy(logits, labels), regularizer)


class CodecSession:
    """Encoder/reconstructor state for one batch of features transmitted step by step."""

    def __init__(self, params, cfg: CodecConfig, batch_size):
        self.params = params
        self.cfg = cfg
        self.enc_state = init_encoder_state(cfg, batch_size)
        self.rec_state = init_reconstructor_state(cfg, batch_size)
        self.outputs = StepOutputs()
        self.sent: List[SpikeTensor] = []
        self.received: List[SpikeTensor] = []

    @property
    def steps_run(self):
        return len(self.outputs)

    def step(self, feature: Tensor, transmit: Callable[[int, SpikeTensor], SpikeTensor]):
        """Run one time step; `transmit(step_index, S_t)` plays the channel and returns S^_t."""
        if self.steps_run >= self.cfg.T:
            raise ShapeError('CodecSession.step', (self.steps_run + 1,), (self.cfg.T,))
        s_t, self.enc_state = encode_step(feature, self.enc_state, self.params['alpha'], self.cfg)
        s_hat = transmit(self.steps_run + 1, s_t)
        f_s, f_m, self.rec_state = reconstruct_step(s_hat, self.rec_state, self.params['beta'], self.cfg)
        self.outputs.append(f_s, f_m)
        self.sent.append(s_t)
        self.received.append(s_hat)
        return s_t, s_hat

    def reconstruct(self, t: Optional[int] = None) -> Tensor:
        return convert(self.outputs, self.steps_run if t is None else t, self.params['gamma'], self.cfg)


def random_channel(ber, rng):
    """Transmit callable drawing flips for every row from one shared generator (training)."""
    def transmit(step_index, spikes):
        return apply_flips(spikes, flip_mask(spikes.shape, ber, rng))
    return transmit


def run_codec(feature: Tensor, params, cfg: CodecConfig, t, transmit):
    """Transmit `feature` for t steps -> (F', sent spike list)."""
    session = CodecSession(params, cfg, feature.shape[0])
    for _ in range(t):
        session.step(feature, transmit)
    return session.reconstruct(t), session.sent


def encode_payload(feature: Tensor, params, cfg: CodecConfig, t):
    """Encoder only: the t spike maps S_1..S_t of `feature`."""
    enc_state = init_encoder_state(cfg, feature.shape[0])
    spikes = []
    for _ in range(t):
        s_t, enc_state = encode_step(feature, enc_state, params['alpha'], cfg)
        spikes.append(s_t)
    return spikes


def decode_payload(received: List[SpikeTensor], params, cfg: CodecConfig) -> Tensor:
    """Reconstructor and converter only: F' from already-received spike maps."""
    rec_state = init_reconstructor_state(cfg, received[0].shape[0])
    outputs = StepOutputs()
    for s_hat in received:
        f_s, f_m, rec_state = reconstruct_step(s_hat, rec_state, params['beta'], cfg)
        outputs.append(f_s, f_m)
    return convert(outputs, len(received), params['gamma'], cfg)


def sample_step_and_ber(cfg: CodecConfig, rng):
    t = int(rng.integers(cfg.t0, cfg.T + 1))
    low, high = cfg.ber_range
    p = float(rng.uniform(low, high)) if high > low else float(low)
    return t, p


def _train_stage(stage, dataset, params, cfg, seed, trainable, epochs, lr, batch_size, betas, eps, with_backbone):
    optimizer = Adam(params.select(trainable), lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
    stage_tag = name_tag(stage)
    rates = []

    def step(indices, epoch, batch):
        rng = substream(PURPOSE_TRAIN, seed, stage_tag, epoch, batch)
        t, p = sample_step_and_ber(cfg, rng)
        optimizer.zero_grad()
        images = Tensor(dataset.train_x[indices])
        if with_backbone:
            feature = extract_features(images, params['mu'])
        else:
            with no_grad():
                feature = extract_features(images, params['mu'])
        f_prime, spikes = run_codec(feature, params, cfg, t, random_channel(p, rng))
        logits = execute_task(f_prime, params['lambda'])
        loss = codec_loss(logits, dataset.train_y[indices], spikes, t, cfg.entropy_weight)
        loss.backward()
        optimizer.step()
        rates.append(float(np.mean([s.rate() for s in spikes])))
        return loss.item()

    history = run_epochs(stage, epochs, len(dataset.train_y), batch_size, seed, step)
    tail = rates[-max(1, len(rates) // max(epochs, 1)):]
    logger.info(f"{stage}: mean spike rate over the last epoch {np.mean(tail):.3f}")
    return history


def train_codec(dataset, params, cfg: CodecConfig, seed, epochs=10, lr=1e-3, batch_size=64,
                betas=(0.9, 0.999), eps=1e-8):
    """Train alpha, beta, gamma with mu and lambda frozen; one random t and BER per batch."""
    init_codec(cfg, seed, params)
    params.freeze(('mu', 'lambda'))
    params.unfreeze(('alpha', 'beta', 'gamma'))
    stage = 'train-codec-fixed' if cfg.fixed_rate else 'train-codec'
    history = _train_stage(stage, dataset, params, cfg, seed, ('alpha', 'beta', 'gamma'),
                           epochs, lr, batch_size, betas, eps, with_backbone=False)
    return params, history


def joint_finetune(dataset, params, cfg: CodecConfig, seed, epochs=3, lr=2e-4, batch_size=64,
                   betas=(0.9, 0.999), eps=1e-8):
    """Fine-tune mu, lambda, alpha, beta and gamma together."""
    tags = ('mu', 'lambda', 'alpha', 'beta', 'gamma')
    params.unfreeze(tags)
    history = _train_stage('finetune', dataset, params, cfg, seed, tags,
                           epochs, lr, batch_size, betas, eps, with_backbone=True)
    return params, history


def evaluate_codec(params, cfg: CodecConfig, features, labels, t, transmit_for_batch, batch_size=EVAL_BATCH):
    """
    Accuracy of f_T(F') at t steps. `transmit_for_batch(start, stop)` returns
    the transmit callable for rows [start, stop).
    """
    logits = []
    with no_grad():
        for start in range(0, len(features), batch_size):
            stop = min(start + batch_size, len(features))
            f_prime, _ = run_codec(Tensor(features[start:stop]), params, cfg, t, transmit_for_batch(start, stop))
            logits.append(execute_task(f_prime, params['lambda']).data)
    return accuracy(np.concatenate(logits, axis=0), labels)
