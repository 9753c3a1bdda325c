"""Exception hierarchy shared by all rppg_lab modules.

The three branches map onto CLI exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class RppgLabError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(RppgLabError):
    """Invalid configuration or parameter value."""

    exit_code = 2


class InvalidBandError(ConfigError):
    """Filter band edges are out of order or exceed Nyquist."""


class IndivisiblePatchSizeError(ConfigError):
    """Map side is not a multiple of the patch size."""


class WindowTooLongError(ConfigError):
    """Sliding-window length exceeds the signal length."""


class HrOutOfRangeError(ConfigError):
    """Ground-truth heart rate falls outside the configured bin grid."""


class EmptySideError(ConfigError):
    """A dataset split would leave one side empty."""


class DataError(RppgLabError):
    """Malformed, truncated or inconsistent data."""

    exit_code = 3


class LengthMismatchError(DataError):
    """Paired sequences have different lengths."""


class ShapeMismatchError(DataError):
    """Array shapes are incompatible for the requested operation."""


class TooShortInputError(DataError):
    """Input signal is shorter than the operation requires."""


class TooFewBeatsError(DataError):
    """Not enough detected beats for interval analysis."""


class ZeroMeanChannelError(DataError):
    """A color channel mean is ~0, so temporal normalization is undefined."""


class BadMagicError(DataError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(DataError):
    """File format version is not supported."""


class TruncatedFileError(DataError):
    """File ends before the payload promised by its header."""


class LabelLengthMismatchError(DataError):
    """A BVP label segment does not match its clip length."""


class EmptyMaskError(DataError):
    """A mask plan contains no masked patches to score."""


class NumericError(RppgLabError):
    """Numerical failure during optimization."""

    exit_code = 4


class NonScalarLossError(NumericError):
    """backward() called on a non-scalar tensor."""


class NanGradientError(NumericError):
    """A gradient contained NaN/Inf; the optimizer step was aborted."""

    def __init__(self, param_name, message=None):
        self.param_name = param_name
        super().__init__(message or f"non-finite gradient in parameter '{param_name}'")
