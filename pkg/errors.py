"""
PPAD Errors

Every failure the toolkit can report. Each class also derives from the
closest builtin exception so callers can catch either the PPAD type or the
familiar one (FileNotFoundError, ValueError, ...).

The CLI maps these to exit codes:
    ConfigError -> 2 (usage error)
    any other PPADError / OSError -> 1 (runtime error)
"""


class PPADError(Exception):
    """Base class for all toolkit errors."""


# ---------------------------------------------------------------------------
# Imaging
# ---------------------------------------------------------------------------

class ImageNotFoundError(PPADError, FileNotFoundError):
    """The image file does not exist."""


class UnsupportedFormatError(PPADError, ValueError):
    """The file is not a decodable graymap / PNG raster."""


class ZeroDimensionError(PPADError, ValueError):
    """An image, field or target size has a zero (or negative) side."""


class DimensionMismatchError(PPADError, ValueError):
    """Two arrays that must share a shape do not."""


class PPADIOError(PPADError, OSError):
    """Writing an artifact failed."""


# ---------------------------------------------------------------------------
# Mask generation
# ---------------------------------------------------------------------------

class RegionTooSmallError(PPADError, ValueError):
    """The placement region has fewer pixels than points requested."""


class DegenerateFieldError(PPADError, ValueError):
    """The sampling field is zero (or too sparse) inside the region."""


class DegenerateInputError(PPADError, ValueError):
    """Fewer than three distinct points, or all points collinear."""


class EmptyInteriorError(PPADError, ValueError):
    """A closed curve encloses no pixel center."""


class GenerationFailedError(PPADError, RuntimeError):
    """No acceptable mask after the maximum number of attempts."""


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------

class EmptyMaskError(PPADError, ValueError):
    """A mask with no pixel set was given where one is required."""


class InvalidWeightError(PPADError, ValueError):
    """Gamma weight w must satisfy w > -1."""


# ---------------------------------------------------------------------------
# Prompts / encoder
# ---------------------------------------------------------------------------

class UnknownWordError(PPADError, ValueError):
    """A word outside the fixed vocabulary."""


class EmptyInputError(PPADError, ValueError):
    """An encoder received zero rows."""


# ---------------------------------------------------------------------------
# Training / evaluation
# ---------------------------------------------------------------------------

class NotEnoughImagesError(PPADError, ValueError):
    """The dataset holds fewer images than requested."""


class CheckpointError(PPADError, ValueError):
    """Bad checkpoint magic/version, or frozen weights that do not match."""


class SingleClassInputError(PPADError, ValueError):
    """AUC/AP need both normal and abnormal labels."""


# ---------------------------------------------------------------------------
# Configuration / CLI
# ---------------------------------------------------------------------------

class ConfigError(PPADError, ValueError):
    """Unknown key, malformed value or missing required setting."""
