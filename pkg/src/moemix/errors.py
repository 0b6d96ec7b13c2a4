"""Shared exception types.

Exit-code mapping used by the CLI: usage errors -> 1, DataError -> 2,
NumericError -> 3.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values or a numerically invalid state (NaN gradients, etc.)."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class SurgeryError(ValueError):
    """Checkpoint surgery asked to combine incompatible parameter sets."""


class DataError(ValueError):
    """Corpus or mixture configuration is unusable."""


class CheckpointError(IOError):
    """Checkpoint file is corrupt, truncated, or has an unknown version."""


class AlignmentError(ValueError):
    """Reports being compared do not cover the same domains."""
