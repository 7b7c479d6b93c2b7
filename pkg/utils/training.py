import logging
import math

import numpy as np

from errors import DivergenceError, NonFiniteError
from utils.rng import PURPOSE_SHUFFLE, name_tag, substream

logger = logging.getLogger(__name__)


def minibatches(num_samples, batch_size, rng):
    """Yield shuffled index arrays covering every sample once; the last batch may be short."""
    order = rng.permutation(num_samples)
    for start in range(0, num_samples, batch_size):
        yield order[start:start + batch_size]


def run_epochs(stage, epochs, num_samples, batch_size, seed, step_fn):
    """
    Drive `step_fn(indices, epoch, batch) -> loss` over shuffled minibatches.

    A non-finite loss, or a non-finite value anywhere in the forward or
    backward pass, aborts the stage with DivergenceError. Returns the mean
    loss of every epoch.
    """
    history = []
    for epoch in range(epochs):
        rng = substream(PURPOSE_SHUFFLE, seed, name_tag(stage), epoch)
        total, count = 0.0, 0
        for batch, indices in enumerate(minibatches(num_samples, batch_size, rng)):
            try:
                loss = float(step_fn(indices, epoch, batch))
            except NonFiniteError as e:
                logger.error(f"{stage}: {e}")
                raise DivergenceError(stage, epoch, batch, float('nan'))
            if not math.isfinite(loss):
                raise DivergenceError(stage, epoch, batch, loss)
            total += loss * len(indices)
            count += len(indices)
        mean_loss = total / max(count, 1)
        history.append(mean_loss)
        logger.info(f"{stage}: epoch {epoch + 1}/{epochs} loss={mean_loss:.5f}")
    return history


def accuracy(logits, labels):
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))
