"""Exception hierarchy shared across the package."""


class TuNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TuNetError, ValueError):
    """Raised when tensor shapes are incompatible.

    The offending axis is kept on the instance so callers can report it.
    """

    def __init__(self, message: str, axis: str | int | None = None):
        super().__init__(message if axis is None else f"{message} (axis: {axis})")
        self.axis = axis


class GraphError(TuNetError, RuntimeError):
    """Raised on misuse of the differentiation graph."""


class NonFiniteError(TuNetError, FloatingPointError):
    """Raised when a loss or gradient becomes NaN/Inf."""

    def __init__(self, message: str, name: str | None = None):
        super().__init__(message)
        self.name = name


class ZeroVarianceError(TuNetError, ValueError):
    def __init__(self, channel: int):
        super().__init__(f"channel {channel} has zero variance over its normalization support")
        self.channel = channel


class LabelError(TuNetError, ValueError):
    """Raised for label values outside {0, 1, 2, 3}."""


class EmptyMaskError(TuNetError, ValueError):
    """Raised when a distance metric is requested on an empty mask."""


class EmptyPredictionError(EmptyMaskError):
    pass


class EmptyTruthError(EmptyMaskError):
    pass


class VolumeFormatError(TuNetError, ValueError):
    """Base class for volume file decoding failures."""

    code = "format"


class BadMagicError(VolumeFormatError):
    code = "bad-magic"


class TruncatedPayloadError(VolumeFormatError):
    code = "truncated"


class DTypeError(VolumeFormatError):
    code = "dtype"


class LabelRangeError(VolumeFormatError, LabelError):
    code = "label-range"


class ConfigError(TuNetError, ValueError):
    pass
