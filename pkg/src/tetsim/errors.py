"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class TetsimError(Exception):
    exit_code = 1


class InvalidInputError(TetsimError, ValueError):
    exit_code = 2


class DegenerateGeometryError(InvalidInputError):
    """Coplanar input, zero-area faces, or other geometry with no well-defined answer."""


class InvalidRigError(InvalidInputError):
    pass


class NumericalError(TetsimError, ArithmeticError):
    exit_code = 3


class SingularGradientError(NumericalError):
    pass


class SolverDivergenceError(NumericalError):
    def __init__(self, substep, frame=None, message=None):
        self.substep = substep
        self.frame = frame
        if message is None:
            where = f"substep {substep}" if frame is None else f"frame {frame}, substep {substep}"
            message = f"non-finite state at {where}"
        super().__init__(message)


class UnresolvableInversionWarning(RuntimeWarning):
    pass
