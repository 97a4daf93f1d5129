"""Exception hierarchy shared by every xmas module.

The CLI maps these onto exit codes, so each class carries one.
"""


class XmasError(Exception):
    exit_code = 1


class ShapeError(XmasError, ValueError):
    """Grids, label sets or array shapes that should agree do not."""

    exit_code = 2


class ConfigError(XmasError, ValueError):
    exit_code = 2


class DependencyError(XmasError):
    """A pipeline stage ran before the artifact it consumes existed."""

    exit_code = 3


class NumericError(XmasError, FloatingPointError):
    """Non-finite loss during training.

    ``state`` holds whatever the trainer could dump at the point of failure.
    """

    exit_code = 4

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}


class SamplingError(XmasError, RuntimeError):
    exit_code = 4


class VolumeIOError(XmasError, OSError):
    exit_code = 5


class MalformedHeaderError(VolumeIOError):
    pass


class TruncatedFileError(VolumeIOError):
    pass


class ChecksumError(VolumeIOError):
    pass
