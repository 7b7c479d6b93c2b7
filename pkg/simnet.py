"""
Semantic-similarity network.

SimNet_E (omega) runs on the transmitter and squeezes the feature into a
1-bit prior K. SimNet_D (phi) runs on the receiver and scores how close
the reconstruction F' is to F, given F', the noisy prior K^ and the BER.
It is trained to regress the cosine similarity of the task-head logits.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from backbone import batched_features, execute_task
from channel import apply_flips, flip_mask
from codec import CodecConfig, random_channel, run_codec, sample_step_and_ber
from errors import ShapeError, StatsError
from snn_neurons import SpikeTensor
from tensor_core import (Adam, ParamGroup, Tensor, clamp, concat, conv_block, dense_block, flatten, scale,
                         global_avg_pool, no_grad, relu, reshape, sign_quantize, squared_error)
from utils.config_loader import get_config_value
from utils.rng import PURPOSE_EVAL, PURPOSE_INIT, PURPOSE_TRAIN, name_tag, substream
from utils.training import run_epochs

logger = logging.getLogger(__name__)

RMS_FLOOR = 1e-8


@dataclass
class SimNetConfig:
    prior_shape: Tuple[int, int, int] = (8, 1, 1)
    feature_shape: Tuple[int, int, int] = (16, 4, 4)
    hidden_channels: int = 16
    hidden_units: int = 64

    @property
    def prior_bits(self):
        return int(np.prod(self.prior_shape))

    @classmethod
    def from_config(cls, config):
        return cls(
            prior_shape=tuple(get_config_value(config, 'simnet', 'prior_shape', default=[8, 1, 1])),
            feature_shape=tuple(get_config_value(config, 'backbone', 'split_shape', default=[16, 4, 4])),
            hidden_channels=get_config_value(config, 'simnet', 'hidden_channels', default=16),
            hidden_units=get_config_value(config, 'simnet', 'hidden_units', default=64),
        )


def init_simnet(cfg: SimNetConfig, seed, params):
    rng = substream(PURPOSE_INIT, seed, name_tag('simnet'))
    channels, height, width = cfg.feature_shape
    omega = ParamGroup('omega')
    omega.add_conv('sim_e1', channels, cfg.hidden_channels, 3, rng)
    omega.add_conv('sim_e2', cfg.hidden_channels, cfg.prior_shape[0], 1, rng)
    phi = ParamGroup('phi')
    phi.add_linear('sim_d1', channels * height * width + 1 + cfg.prior_bits + 1, cfg.hidden_units, rng)
    phi.add_linear('sim_d2', cfg.hidden_units, 1, rng)
    params.add(omega)
    params.add(phi)
    return params


def prior_activations(feature: Tensor, omega: ParamGroup, cfg: SimNetConfig) -> Tensor:
    """SimNet_E before quantization: (N, c_p, 1, 1)."""
    if feature.shape[1:] != cfg.feature_shape:
        raise ShapeError('extract_prior', feature.shape[1:], cfg.feature_shape)
    h = relu(conv_block(feature, omega, 'sim_e1'))
    pooled = global_avg_pool(conv_block(h, omega, 'sim_e2'))
    return reshape(pooled, (pooled.shape[0],) + cfg.prior_shape)


def extract_prior(feature: Tensor, omega: ParamGroup, cfg: SimNetConfig) -> SpikeTensor:
    return SpikeTensor(sign_quantize(prior_activations(feature, omega, cfg)))


def simnet_inputs(f_prime: Tensor, k_hat: SpikeTensor, ber, cfg: SimNetConfig) -> Tensor:
    """
    SimNet_D input rows: F' flattened and scaled to unit RMS, log of that RMS,
    the prior bits mapped to +-1 and the BER. F' enters as a constant.
    """
    n = f_prime.shape[0]
    if f_prime.shape[1:] != cfg.feature_shape:
        raise ShapeError('estimate_similarity', f_prime.shape[1:], cfg.feature_shape)
    if k_hat.shape != (n,) + cfg.prior_shape:
        raise ShapeError('estimate_similarity', k_hat.shape, (n,) + cfg.prior_shape)
    flat = f_prime.data.reshape(n, -1)
    rms = np.maximum(np.sqrt(np.mean(flat ** 2, axis=1, keepdims=True)), RMS_FLOOR)
    ber_column = Tensor(np.broadcast_to(np.asarray(ber, dtype=np.float64), (n,)).reshape(n, 1))
    prior = scale(flatten(k_hat.tensor), 2.0) - 1.0
    return concat([Tensor(flat / rms), Tensor(np.log(rms)), prior, ber_column], axis=1)


def similarity_head(f_prime: Tensor, k_hat: SpikeTensor, ber, phi: ParamGroup, cfg: SimNetConfig) -> Tensor:
    """SimNet_D before clamping, (N,). Training regresses this output directly."""
    hidden = relu(dense_block(simnet_inputs(f_prime, k_hat, ber, cfg), phi, 'sim_d1'))
    score = dense_block(hidden, phi, 'sim_d2')
    return reshape(score, (score.shape[0],))


def estimate_similarity(f_prime: Tensor, k_hat: SpikeTensor, ber, phi: ParamGroup, cfg: SimNetConfig) -> Tensor:
    """SimNet_D -> (N,) scores clamped to [-1, 1]. `ber` is a scalar or one value per row."""
    return clamp(similarity_head(f_prime, k_hat, ber, phi, cfg), -1.0, 1.0)


def cosine_rows(u, v):
    """Row-wise cosine similarity of two (N, K) arrays."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError('cosine', u.shape, v.shape)
    norms = np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)
    if np.any(norms == 0.0):
        raise StatsError("cosine similarity of a zero-norm logit vector is undefined")
    return np.clip(np.sum(u * v, axis=1) / norms, -1.0, 1.0)


def true_similarity(feature: Tensor, f_prime: Tensor, lam: ParamGroup):
    """Cosine of f_T(F) and f_T(F') per row."""
    with no_grad():
        return cosine_rows(execute_task(feature, lam).data, execute_task(f_prime, lam).data)


def train_simnet(dataset, params, codec_cfg: CodecConfig, cfg: SimNetConfig, seed, epochs=12, lr=1e-3,
                 batch_size=64, betas=(0.9, 0.999), eps=1e-8):
    """Train omega and phi against cosine labels with everything else frozen; the MSE is taken before clamping."""
    init_simnet(cfg, seed, params)
    params.freeze(('mu', 'lambda', 'alpha', 'beta', 'gamma'))
    params.unfreeze(('omega', 'phi'))
    optimizer = Adam(params.select(('omega', 'phi')), lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
    features = batched_features(dataset.train_x, params)
    stage_tag = name_tag('train-simnet')

    def step(indices, epoch, batch):
        rng = substream(PURPOSE_TRAIN, seed, stage_tag, epoch, batch)
        t, p = sample_step_and_ber(codec_cfg, rng)
        feature = Tensor(features[indices])
        with no_grad():
            f_prime, _ = run_codec(feature, params, codec_cfg, t, random_channel(p, rng))
        labels = true_similarity(feature, f_prime, params['lambda'])
        optimizer.zero_grad()
        prior = extract_prior(feature, params['omega'], cfg)
        k_hat = apply_flips(prior, flip_mask(prior.shape, p, rng))
        loss = squared_error(similarity_head(f_prime, k_hat, p, params['phi'], cfg), labels)
        loss.backward()
        optimizer.step()
        return loss.item()

    history = run_epochs('train-simnet', epochs, len(dataset.train_y), batch_size, seed, step)
    return params, history


def evaluate_simnet(params, codec_cfg: CodecConfig, cfg: SimNetConfig, features, seed, batch_size=500):
    """
    Held-out check of SimNet_D: returns (estimates, true similarities, per-row BERs).
    Each batch draws its own t and BER like training does.
    """
    estimates, truths, bers = [], [], []
    with no_grad():
        for batch, start in enumerate(range(0, len(features), batch_size)):
            rng = substream(PURPOSE_EVAL, seed, name_tag('eval-simnet'), batch)
            t, p = sample_step_and_ber(codec_cfg, rng)
            feature = Tensor(features[start:start + batch_size])
            f_prime, _ = run_codec(feature, params, codec_cfg, t, random_channel(p, rng))
            prior = extract_prior(feature, params['omega'], cfg)
            k_hat = apply_flips(prior, flip_mask(prior.shape, p, rng))
            estimates.append(estimate_similarity(f_prime, k_hat, p, params['phi'], cfg).data)
            truths.append(true_similarity(feature, f_prime, params['lambda']))
            bers.append(np.full(feature.shape[0], p))
    return np.concatenate(estimates), np.concatenate(truths), np.concatenate(bers)
