"""Exception hierarchy shared across the engine."""


class ChromabrushError(Exception):
    """Base class for every error raised by this package."""


class InvalidShapeError(ChromabrushError, ValueError):
    """A tensor shape is malformed (zero or negative extent, bad rank)."""


class ShapeError(ChromabrushError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(ChromabrushError, ValueError):
    """A tensor contains NaN or infinite values."""


class WeightFormatError(ChromabrushError):
    """A weight file does not follow the VGGW container format."""


class TruncatedFileError(WeightFormatError):
    """A weight file ended before the declared payload."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TopologyError(ChromabrushError):
    """Weight entries do not match the network topology."""


class CorruptWeightsError(ChromabrushError):
    """A weight file parsed cleanly but holds non-finite values."""


class CaptureError(ChromabrushError, KeyError):
    """A requested capture layer does not exist in the topology."""


class ConfigError(ChromabrushError, ValueError):
    """Loss or run configuration is inconsistent."""


class DecodeError(ChromabrushError):
    """An input image could not be read or decoded."""


class SizeError(ChromabrushError, ValueError):
    """An image is too small to push through the network."""


class LineSearchFailure(ChromabrushError):
    """No acceptable step was found along the search direction."""

    def __init__(self, message: str, evals: int):
        super().__init__(message)
        self.evals = evals


class UsageError(ChromabrushError):
    """Invalid command-line invocation."""
