"""Exception hierarchy shared by all modules.

Everything inherits from PcnclawsError so callers can catch the whole
family generically; the CLI maps these to exit code 2.
"""


class PcnclawsError(Exception):
    """Base class for all package errors."""


class InvalidParam(PcnclawsError):
    """Physical or configuration parameter outside its valid range."""


class NonInvertible(PcnclawsError):
    """Deformation gradient (or other matrix) is singular within tolerance."""


class OutOfDomain(PcnclawsError):
    """A particle left the simulation domain margin."""


class Diverged(PcnclawsError):
    """Positions or velocities exceeded the blow-up sentinel."""

    def __init__(self, message, frame=None):
        super().__init__(message)
        self.frame = frame


class ShapeMismatch(PcnclawsError):
    """Array arguments have inconsistent shapes."""


class MissingAdjoint(PcnclawsError):
    """A taped primitive has no registered adjoint (programming error)."""


class TooShort(PcnclawsError):
    """A trajectory is shorter than the requested training window."""


class AllDiverged(PcnclawsError):
    """Training produced no usable gradient for an entire epoch."""


class NoProgress(PcnclawsError):
    """Parameter estimation failed to improve the loss at all."""


class BadMagic(PcnclawsError):
    """Serialized file does not start with the expected magic bytes."""


class VersionMismatch(PcnclawsError):
    """Serialized file has an unsupported format version."""


class TruncatedFile(PcnclawsError):
    """Serialized file ends mid-record."""

    def __init__(self, message, frame=None):
        super().__init__(message)
        self.frame = frame


class ChecksumMismatch(PcnclawsError):
    """Trailing CRC32 does not match the file contents."""


class MaterialMismatch(PcnclawsError):
    """Checkpoint was trained for a different material kind."""
