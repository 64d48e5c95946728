"""Exception hierarchy shared across the package."""


class PinchError(ValueError):
    """Base class for all errors raised by pinchwsr."""


class InvalidParameterError(PinchError):
    pass


class DegenerateGeometryError(PinchError):
    """A user coincides with an antenna point, so the channel is undefined."""


class ShapeError(PinchError):
    pass


class NormalizationError(PinchError):
    pass


class DomainError(PinchError):
    """Input outside the mathematical domain of a transform or primitive."""


class LinearizationError(PinchError):
    pass


class BarrierDomainError(PinchError):
    """Point on or outside the power ball handed to the log barrier."""


class GridTooLargeError(PinchError):
    pass


class TapeError(PinchError):
    pass


class GradCheckError(PinchError):
    pass
