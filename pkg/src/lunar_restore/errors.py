"""Exception hierarchy.

Each class carries the CLI exit code it maps to, so the command line layer
can translate any library failure without a lookup table.
"""


class LunarRestoreError(Exception):
    exit_code = 1


class ValidationError(LunarRestoreError, ValueError):
    """Bad arguments or inputs that violate a documented precondition."""

    exit_code = 2


class BoundsError(ValidationError):
    """A coordinate, pixel index or rectangle lies outside the raster."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class PlacementError(ValidationError):
    """A stripe template cannot be placed on the target image."""


class NoStripesError(ValidationError):
    """Template extraction was asked for on an empty mask."""


class CoverageError(ValidationError):
    """A template would zero out more pixels than the coverage budget allows."""


class FormatError(LunarRestoreError):
    """Unsupported or malformed raster file."""

    exit_code = 1


class CorruptCheckpointError(LunarRestoreError):
    exit_code = 1


class DatasetLoadError(LunarRestoreError):
    exit_code = 1


class NonFiniteLossError(LunarRestoreError, FloatingPointError):
    exit_code = 3

    def __init__(self, epoch, batch, value):
        super().__init__(
            f"non-finite training loss {value!r} at epoch {epoch}, batch {batch}"
        )
        self.epoch = epoch
        self.batch = batch
        self.value = value
