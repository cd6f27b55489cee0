class PhyDiffError(Exception):
    """Base class for every error raised by the phydiff modules."""


class ShapeError(PhyDiffError, ValueError):
    """Tensor extents do not agree with what an operation expects."""


class ConfigError(PhyDiffError, ValueError):
    """A configuration value is missing, unknown or violates an invariant."""


class ContractError(PhyDiffError, ValueError):
    """A caller broke an operation's precondition (index range, scalar loss, ...)."""


class InvariantViolation(PhyDiffError, RuntimeError):
    """An internal numerical invariant failed; the run cannot continue."""


class TrainingDiverged(PhyDiffError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, step: int, loss: float, partial=None):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
        # Training state up to the last finite step, for the partial checkpoint.
        self.partial = partial


class CheckpointError(PhyDiffError):
    """A checkpoint file is truncated, from another format version, or from another model."""
