"""Exception types shared across the toolkit."""


class DualsplatError(Exception):
    """Base class for all toolkit errors."""


class DegenerateTangents(DualsplatError):
    """Tangent vectors are (near-)parallel; no well defined disk normal."""


class LengthMismatch(DualsplatError):
    """Coefficient array length does not match the requested basis degree."""


class ShapeMismatch(DualsplatError):
    """Array arguments disagree in shape where equal shapes are required."""


class MissingForwardState(DualsplatError):
    """A backward pass was requested without a matching forward pass."""


class WrongSetRole(DualsplatError):
    """Operation requires a Gaussian set with a different role tag."""


class DegenerateBounds(DualsplatError):
    """Normalization box has (near-)zero extent on some axis."""


class EmptyMask(DualsplatError):
    """A masked reduction received a mask with no valid pixels."""


class EmptySet(DualsplatError):
    """Operation requires a non-empty Gaussian set."""


class NonFiniteGradient(DualsplatError):
    """NaN/Inf gradient fed to the optimizer; message names group and index."""


class InsufficientViews(DualsplatError):
    """Training requires at least two posed views."""


class DivergenceDetected(DualsplatError):
    """Training loss became NaN/Inf."""


class MissingFile(DualsplatError):
    """Dataset manifest references a file that does not exist."""


class ManifestParseError(DualsplatError):
    """Dataset manifest is malformed; message carries field context."""


class UnknownPreset(DualsplatError):
    """No generator scene preset registered under that name."""


class ConfigValidationError(DualsplatError):
    """Run configuration rejected; message carries the offending key path."""


class CheckpointVersionMismatch(DualsplatError):
    """Checkpoint file was written by an incompatible format version."""
