"""Exception types raised across the package."""


class KronestError(Exception):
    """Base class for all package errors."""


class ShapeError(KronestError, ValueError):
    """Array dimensions do not conform to the declared Kronecker shape."""


class ParameterError(KronestError, ValueError):
    """A tuning or configuration parameter is out of its valid range."""


class NearSingularGram(KronestError, ArithmeticError):
    """The Gram matrix of a factor is (numerically) singular.

    Signals factor collapse; the optimizer reports it as a failed run.
    """

    def __init__(self, min_eig, floor):
        self.min_eig = float(min_eig)
        self.floor = float(floor)
        super().__init__(
            f"near-singular Gram matrix: min eigenvalue {self.min_eig:.3e} "
            f"<= floor {self.floor:.3e}")


class DegenerateInit(KronestError):
    """The initial estimate has no usable signal (e.g. all-zero factors)."""


class Infeasible(KronestError):
    """The Dantzig constraint set is empty for the given radius."""


class MaxIterations(KronestError):
    """An iterative solver hit its iteration cap before reaching tolerance.

    The last iterate and its residual are attached so callers can still
    inspect or use them.
    """

    def __init__(self, message, solution=None, residual=None, iterations=None):
        super().__init__(message)
        self.solution = solution
        self.residual = residual
        self.iterations = iterations
