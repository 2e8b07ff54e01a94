"""Exception taxonomy shared across the package.

The CLI maps these onto distinct process exit codes, so keep the
hierarchy flat and stable.
"""


class GaborCnnError(Exception):
    """Base class for all package errors."""


class ShapeError(GaborCnnError, ValueError):
    """Tensor rank/shape/geometry mismatch."""


class ConfigError(GaborCnnError, ValueError):
    """Invalid experiment configuration or network spec (CLI exit 2)."""


class DataError(GaborCnnError, ValueError):
    """Dataset loading or generation failure (CLI exit 3)."""


class NumericError(GaborCnnError, ArithmeticError):
    """Non-finite loss or gradients; fail fast, no silent corruption (CLI exit 4)."""


class CheckpointError(GaborCnnError, ValueError):
    """Checkpoint read/write failure.

    `code` distinguishes the failure class: 'bad_magic', 'truncated',
    'shape_mismatch', 'missing_tensor'.
    """

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code
