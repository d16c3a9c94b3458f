"""Exception hierarchy shared by all modules."""


class VibTomoError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(VibTomoError, ValueError):
    """Bad user input: wrong shapes, out-of-range parameters, malformed files."""


class ShapeError(ValidationError):
    pass


class MeshQualityError(VibTomoError):
    """An element has a non-positive Jacobian at a quadrature point."""


class DegenerateSystemError(VibTomoError):
    """The reduced system has no free degrees of freedom."""


class EigenConvergenceError(VibTomoError):
    pass


class UnsupportedDampingError(VibTomoError):
    """A mode is critically damped or overdamped."""


class RankDeficiencyError(VibTomoError):
    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction


class FitError(VibTomoError):
    pass


class UndefinedCorrelationError(VibTomoError):
    pass


class AnchorMissingError(VibTomoError):
    """The density sub-block has no information to pin it.

    ``w`` carries the stiffness estimate that could still be computed.
    """

    def __init__(self, message, w=None):
        super().__init__(message)
        self.w = w


class DivergenceError(VibTomoError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
