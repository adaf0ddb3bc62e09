"""
Exception hierarchy for plm-kit.

Every error derives from PLMError and from the closest builtin, so callers can
catch either. The CLI maps these classes to exit codes (see cli.run_cli).
"""

from __future__ import annotations

from typing import Optional


class PLMError(Exception):
    """Base class for all plm-kit errors."""


class ConfigError(PLMError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class ShapeError(PLMError, ValueError):
    """Tensor or model input has the wrong dimensions."""


class GradientStateError(PLMError, RuntimeError):
    """Gradients are missing, or were not reset before another backward pass."""


class NumericError(PLMError, ArithmeticError):
    """A training loss became NaN or infinite."""


class TaskMismatchError(PLMError, ValueError):
    """Task kind, head kind and metric do not agree."""


class UndefinedMetricError(PLMError, ValueError):
    """A metric is mathematically undefined for the given input."""


class UntrainedDecoderError(PLMError, RuntimeError):
    """Generation requested from a decoder that was never trained."""


# ── Data errors ───────────────────────────────────────────


class DataError(PLMError, ValueError):
    """Root of all input-data failures (exit code 2 on the CLI)."""


class DataFormatError(DataError):
    """Malformed FASTA / CSV input, located by source and line or row."""

    def __init__(
        self,
        message: str,
        source: str = "<stream>",
        line: Optional[int] = None,
        row: Optional[int] = None,
    ):
        self.source = source
        self.line = line
        self.row = row
        self.reason = message
        where = source
        if line is not None:
            where = f"{source}:{line}"
        elif row is not None:
            where = f"{source}: row {row}"
        super().__init__(f"{where}: {message}")


class EmptyDataError(DataError):
    """Empty corpus, split, or sequence where at least one item is required."""


class CheckpointError(DataError):
    """Checkpoint file cannot be read."""


class BadMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class UnsupportedVersionError(CheckpointError):
    """Checkpoint format version is not understood by this release."""


class TruncatedCheckpointError(CheckpointError):
    """File ends before the declared header or payload."""


class CheckpointBoundsError(CheckpointError):
    """Tensor index entry points outside the payload or disagrees with its shape."""


class VocabularyMismatchError(CheckpointError):
    """Checkpoint was written with a different token table."""


class ReplayMismatchError(DataError):
    """Re-running a manifest produced artifacts with different bytes."""
