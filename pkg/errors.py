"""
Exception hierarchy for the knowledge-enhanced contrastive pipeline.

Every error derives from AskError, which is a ValueError so callers that
already guard numeric input with ``except ValueError`` keep working.
"""

from __future__ import annotations


class AskError(ValueError):
    """Base class for every pipeline error."""


# ─── Numerical kernels ──────────────────────────────────────────────


class ZeroNorm(AskError):
    pass


class DimensionMismatch(AskError):
    pass


class LengthMismatch(AskError):
    pass


class ShapeMismatch(AskError):
    pass


class EmptyBatch(AskError):
    pass


class NonPositiveTemperature(AskError):
    pass


class NonFiniteInput(AskError):
    pass


class SupportViolation(AskError):
    pass


class NonFiniteEvaluation(AskError):
    pass


class InvalidStep(AskError):
    pass


# ─── Knowledge bases ────────────────────────────────────────────────


class EmptyCorpus(AskError):
    pass


class EncoderDimensionMismatch(AskError):
    pass


class TooManyClusters(AskError):
    pass


class KTooLarge(AskError):
    pass


class NonPositivePeriod(AskError):
    pass


class IndexOutOfRange(AskError):
    pass


class SnapshotFormatError(AskError):
    pass


# ─── Injection / reliability / transport / objective ────────────────


class RhoOutOfRange(AskError):
    pass


class NonPositiveEpsilon(AskError):
    pass


class BetaOutOfRange(AskError):
    pass


class NonPositiveTau(AskError):
    pass


class NonPositivePotential(AskError):
    pass


class EmptyOutOfBatchSet(AskError):
    pass


# ─── Diagnostics / trainer / cli ────────────────────────────────────


class EmptyKB(AskError):
    pass


class IndexMisalignment(AskError):
    pass


class InvalidCounts(AskError):
    pass


class InvalidDriftSettings(AskError):
    pass


class CorpusFormatError(AskError):
    pass


class KExceedsPoolSize(AskError):
    pass


class ConfigError(AskError):
    """Raised when an experiment configuration fails validation."""
