"""
Exception hierarchy shared by every SpikeHARQ module.

The CLI maps these onto exit codes: ConfigError -> 2, DivergenceError -> 3,
any other SpikeHarqError -> 1.
"""


class SpikeHarqError(Exception):
    """Base class for all project errors."""


class ShapeError(SpikeHarqError):
    def __init__(self, op, shape_a, shape_b):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: shape mismatch {self.shape_a} vs {self.shape_b}")


class NonFiniteError(SpikeHarqError):
    def __init__(self, where):
        self.where = where
        super().__init__(f"non-finite value produced by {where}")


class DivergenceError(SpikeHarqError):
    def __init__(self, stage, epoch, batch, loss):
        self.stage = stage
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"{stage} diverged at epoch {epoch}, batch {batch} (loss={loss})")


class ConfigError(SpikeHarqError):
    def __init__(self, key, reason):
        self.key = key
        self.reason = reason
        super().__init__(f"config '{key}': {reason}")


class CheckpointError(SpikeHarqError):
    def __init__(self, path, reason):
        self.path = path
        self.reason = reason
        super().__init__(f"checkpoint {path}: {reason}")


class StatsError(SpikeHarqError):
    """Degenerate statistics input (zero variance, zero norm, out-of-hull query)."""


class DomainError(SpikeHarqError, ValueError):
    """A value outside the set an object accepts (non-binary spikes, unknown reset mode, ...)."""
