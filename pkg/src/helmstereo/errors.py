"""Exception taxonomy. Each class carries the CLI exit code for its family."""


class HelmstereoError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ParseError(HelmstereoError):
    """Malformed configuration, scene description, or calibration document."""

    exit_code = 2


class CalibrationError(HelmstereoError):
    """Projection matrix fails rank or optical-center consistency checks."""

    exit_code = 3


class DegenerateGeometry(HelmstereoError):
    """Geometric query at a singular configuration (e.g. point at a station center)."""

    exit_code = 3


class BehindCamera(HelmstereoError):
    """Point has non-positive depth in the station frame."""

    exit_code = 3


class OutOfBounds(HelmstereoError):
    """Pixel coordinate outside the image."""

    exit_code = 4


class ImageFormatError(HelmstereoError):
    """Unreadable or unsupported image file."""

    exit_code = 4


class InsufficientConstraints(HelmstereoError):
    """Fewer than three usable reciprocity rows at a tested point."""

    exit_code = 5


class DegenerateMatrix(HelmstereoError):
    """Constraint matrix has rank < 2; the depth cannot be scored."""

    exit_code = 5


class EmptyHull(HelmstereoError):
    """Carving removed every voxel (bad calibration or threshold)."""

    exit_code = 6


class EmptyMask(HelmstereoError):
    """An operation that needs masked pixels received none."""

    exit_code = 7


class MaskMismatch(HelmstereoError):
    """Reports or grids cover different pixel sets."""

    exit_code = 7


class DimensionMismatch(HelmstereoError):
    """Grids with incompatible shapes."""

    exit_code = 7


class Unmasked(HelmstereoError):
    """Queried pixel has no valid value."""

    exit_code = 7


class DegenerateField(HelmstereoError):
    """Gradient field too small or empty to integrate."""

    exit_code = 7


class NonFiniteCost(HelmstereoError):
    """A cost or message overflowed; inputs were not normalized."""

    exit_code = 8


class TooLarge(HelmstereoError):
    """Exhaustive enumeration would exceed the configuration bound."""

    exit_code = 8
