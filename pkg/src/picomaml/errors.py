"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``ConfigError``/``DataError`` exit 2,
``NumericError`` exits 3.
"""


class PicoError(Exception):
    """Base class for all package errors."""


class ConfigError(PicoError, ValueError):
    pass


class DataError(PicoError, ValueError):
    pass


class ParseError(DataError):
    pass


class VocabularyError(DataError):
    pass


class CorruptCheckpointError(DataError):
    pass


class EpisodeError(DataError):
    pass


class SamplingError(EpisodeError):
    pass


class ShapeError(PicoError, ValueError):
    pass


class LengthError(ShapeError):
    pass


class LabelIndexError(PicoError, IndexError):
    pass


class NumericError(PicoError, ArithmeticError):
    pass


class SupervisionError(NumericError):
    """Raised when a loss has no supervised positions."""


class TrainingError(NumericError):
    pass


class ProtocolError(PicoError, RuntimeError):
    """Collective called with inconsistent arguments across ranks."""


class ConsistencyError(ProtocolError):
    """Ranks reached different collectives (diverged control flow)."""


class DeadlockError(ProtocolError):
    pass
