"""Exception types raised across the package.

Every error carries enough context in its message to identify the offending
input (edge triple, line number, shape pair), so callers can surface it
verbatim.
"""


class StarGcnError(Exception):
    """Base class for all package-specific errors."""


# graph construction / masking
class DuplicateEdgeError(StarGcnError):
    pass


class UnknownRatingLevelError(StarGcnError):
    pass


class IndexOutOfRangeError(StarGcnError):
    pass


class UnknownEdgeIdError(StarGcnError):
    pass


# numerics
class ShapeMismatchError(StarGcnError):
    pass


class NotScalarLossError(StarGcnError):
    pass


# model assembly
class MissingFeaturesError(StarGcnError):
    pass


class DecoderAbsentError(StarGcnError):
    pass


class SpecViolationError(StarGcnError):
    pass


class UnknownPairError(StarGcnError):
    pass


# training
class EmptyGraphError(StarGcnError):
    pass


class EmptyBatchError(StarGcnError):
    pass


class NonFiniteLossError(StarGcnError):
    """Signals divergence; the message includes per-block loss diagnostics."""


# evaluation / splits
class EmptyInputError(StarGcnError):
    pass


class DegenerateNodeError(StarGcnError):
    pass


# data ingestion
class ParseError(StarGcnError):
    pass


class CountMismatchError(StarGcnError):
    pass


class DimensionConflictError(StarGcnError):
    pass


# CLI / artifacts
class SpecMismatchError(StarGcnError):
    pass
