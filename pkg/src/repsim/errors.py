"""Exception hierarchy shared across the engine.

Two broad classes matter to callers: DataError (bad files, bad inputs,
misaligned sets) and NumericError (a statistic is undefined for the given
data). The CLI maps them to exit codes 2 and 3 respectively.
"""


class RepsimError(Exception):
    """Base class for all engine errors."""


class DataError(RepsimError):
    """Input data is missing, malformed, or inconsistent."""


class NumericError(RepsimError):
    """A requested statistic is undefined for the given data."""


class BadMagicError(DataError):
    """File does not start with the REPSIM01 magic bytes."""


class SchemaVersionError(DataError):
    """Container declares a metadata schema this engine does not know."""


class TruncatedContainerError(DataError):
    """Container declares tensor bytes beyond the end of the file."""


class ContainerFormatError(DataError):
    """Container metadata is malformed: bad offsets, shapes, or alignment."""


class AlignmentError(DataError):
    """Two sample sets share no common sample ids."""


class UndefinedSimilarityError(NumericError):
    """CKA is undefined because a self-HSIC term is not positive."""
