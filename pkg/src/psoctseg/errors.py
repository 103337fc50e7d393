"""Exception types raised across the toolkit."""


class PsoctsegError(Exception):
    """Base class for all toolkit errors."""


class ContourOrderViolation(PsoctsegError):
    """Lumen/IEL/EEL contours are out of radial order on some A-line."""


class OutOfBounds(PsoctsegError):
    """A contour exceeds the radial extent of the grid."""


class FormatError(PsoctsegError):
    """Dataset record or checkpoint framing is invalid."""


class ShapeMismatch(PsoctsegError):
    """Declared and actual payload shapes disagree."""


class InfeasibleGeometry(PsoctsegError):
    """Sampled phantom layer thicknesses cannot fit in the radial grid."""


class ScaleOutOfRange(PsoctsegError):
    """Radial zoom would push the outer vessel boundary beyond the grid."""


class NonFiniteLoss(PsoctsegError):
    """A loss term evaluated to NaN/Inf; message names the term."""


class MissingCritic(PsoctsegError):
    """Training requested a critic loss without a critic checkpoint."""


class TooFewPatients(PsoctsegError):
    """Dataset has too few patients for the requested split."""


class EmptyBoundary(PsoctsegError):
    """A boundary set required for a distance metric is empty."""


class MissingInterface(PsoctsegError):
    """A named layer interface is absent from the label map."""


class Divergence(PsoctsegError):
    """Critic training produced non-finite losses for too many steps."""
