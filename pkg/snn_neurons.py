"""
Integrate-Fire (IF) and Integrate-and-Hybrid-Fire (IHF) neurons.

Each step charges the membrane with the input current, fires where the
membrane strictly exceeds v_th and resets the fired positions:

    hard reset: m <- s * v_reset + (1 - s) * m
    soft reset: m <- m - v_th * s

IHF shares these dynamics and also hands back the post-reset membrane as a
real-valued output. States are immutable; every step returns a new one.
"""
import logging
from dataclasses import dataclass, replace

import numpy as np

from errors import DomainError, ShapeError
from tensor_core import (Tensor, add, fire_surrogate_grad, is_surrogate_forward, mul, scale, spike_fire,
                         sub)

logger = logging.getLogger(__name__)

DEFAULT_SURROGATE_K = 4.0
RESET_MODES = ('hard', 'soft')
NEURON_KINDS = ('IF', 'IHF')


@dataclass(frozen=True)
class SpikeTensor:
    """A {0,1}-valued Tensor. In surrogate-forward mode the values are firing probabilities."""
    tensor: Tensor

    def __post_init__(self):
        if not is_surrogate_forward():
            values = self.tensor.data
            if not np.all((values == 0.0) | (values == 1.0)):
                raise DomainError("SpikeTensor values must be 0 or 1")

    @classmethod
    def from_bits(cls, bits):
        return cls(Tensor(np.asarray(bits, dtype=np.float64)))

    @property
    def shape(self):
        return self.tensor.shape

    @property
    def bits(self):
        return self.tensor.data.astype(np.uint8)

    def rate(self):
        return float(self.tensor.data.mean()) if self.tensor.size else 0.0


@dataclass(frozen=True)
class NeuronState:
    membrane: Tensor
    v_th: float = 1.0
    v_reset: float = 0.0
    reset_mode: str = 'soft'
    kind: str = 'IF'

    def __post_init__(self):
        if self.v_th <= 0:
            raise DomainError(f"v_th must be positive, got {self.v_th}")
        if self.reset_mode not in RESET_MODES:
            raise DomainError(f"reset_mode must be one of {RESET_MODES}, got {self.reset_mode!r}")
        if self.kind not in NEURON_KINDS:
            raise DomainError(f"kind must be one of {NEURON_KINDS}, got {self.kind!r}")

    @classmethod
    def zeros(cls, shape, kind='IF', reset_mode='soft', v_th=1.0, v_reset=0.0):
        return cls(Tensor(np.zeros(shape)), v_th=v_th, v_reset=v_reset, reset_mode=reset_mode, kind=kind)


def _charge_fire_reset(state, current, k, op):
    if current.shape != state.membrane.shape:
        raise ShapeError(op, state.membrane.shape, current.shape)
    charged = add(state.membrane, current)
    spikes = spike_fire(charged, state.v_th, k)
    if state.reset_mode == 'soft':
        membrane = sub(charged, scale(spikes, state.v_th))
    else:
        keep = sub(Tensor(np.ones(spikes.shape)), spikes)
        membrane = add(mul(charged, keep), scale(spikes, state.v_reset))
    return spikes, replace(state, membrane=membrane)


def if_step(state: NeuronState, current: Tensor, k=DEFAULT_SURROGATE_K):
    """One charge/fire/reset step of an IF layer -> (spikes, new state)."""
    if state.kind != 'IF':
        raise DomainError(f"if_step needs an IF state, got {state.kind}")
    spikes, new_state = _charge_fire_reset(state, current, k, 'if_step')
    return SpikeTensor(spikes), new_state


def ihf_step(state: NeuronState, current: Tensor, k=DEFAULT_SURROGATE_K):
    """One IHF step -> (spikes, post-reset membrane, new state)."""
    if state.kind != 'IHF':
        raise DomainError(f"ihf_step needs an IHF state, got {state.kind}")
    spikes, new_state = _charge_fire_reset(state, current, k, 'ihf_step')
    return SpikeTensor(spikes), new_state.membrane, new_state


def fire_surrogate_backward(pre_activation: Tensor, v_th=1.0, k=DEFAULT_SURROGATE_K) -> Tensor:
    """d sigma(k (m - v_th)) / dm evaluated at the given membrane potentials."""
    return Tensor(fire_surrogate_grad(pre_activation.data, v_th, k))


def reset_session(state: NeuronState) -> NeuronState:
    return replace(state, membrane=Tensor(np.zeros(state.membrane.shape)))
