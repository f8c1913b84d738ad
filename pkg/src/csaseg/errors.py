"""Exception hierarchy shared by all modules.

Each class carries the CLI exit code it maps to (1 usage, 2 data, 3 numeric).
"""


class CsaSegError(Exception):
    exit_code = 2


class ShapeError(CsaSegError, ValueError):
    """Operand shapes are incompatible; ``axis`` names the offending axis."""

    exit_code = 2

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class ConfigError(CsaSegError, ValueError):
    exit_code = 1


class VolumeFormatError(CsaSegError):
    exit_code = 2


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class InvalidSpacingError(VolumeFormatError, ValueError):
    pass


class GeometryMismatchError(CsaSegError, ValueError):
    pass


class DegenerateMaskError(CsaSegError, ValueError):
    """Mask has only one label, so its surface is empty."""


class InfeasibleSpecError(CsaSegError, ValueError):
    pass


class NumericError(CsaSegError, ArithmeticError):
    exit_code = 3


class NonFiniteLossError(NumericError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
