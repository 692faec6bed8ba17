"""Exception hierarchy.

``UsageError`` maps to CLI exit code 1, ``DataError`` to 2, everything else
that escapes to 3.
"""


class EffqaError(Exception):
    """Base class for all package errors."""


class UsageError(EffqaError):
    """Bad invocation: unknown subcommand, invalid config key, bad flag."""


class DataError(EffqaError):
    """Problem with input data or on-disk artifacts."""


# --- configuration / CLI ---

class ConfigError(UsageError):
    pass


class UnknownSubcommand(UsageError):
    pass


# --- corpus ---

class MalformedJson(DataError):
    pass


class SchemaViolation(DataError):
    pass


class MisalignedAnswer(DataError):
    pass


class AlignmentFailure(DataError):
    pass


class EmptyCorpus(DataError):
    pass


# --- numerics ---

class ShapeMismatch(EffqaError):
    pass


class AllMasked(EffqaError):
    pass


class IndexOutOfRange(EffqaError):
    pass


class NonFiniteGradient(EffqaError):
    pass


class UnknownTokenId(EffqaError):
    pass


# --- packing / encoding ---

class TooLong(EffqaError):
    pass


class CandidateTooLong(TooLong):
    pass


# --- extraction ---

class EmptyContext(EffqaError):
    pass


class GoldOutOfWindow(EffqaError):
    pass


# --- vector index ---

class DimensionMismatch(EffqaError):
    pass


class DuplicateEntry(DataError):
    pass


class UnknownContext(EffqaError):
    pass


class FormatError(DataError):
    pass


class ChecksumMismatch(DataError):
    pass


# --- metrics ---

class EmptyGolds(EffqaError):
    pass


class LengthMismatch(EffqaError):
    pass
