"""Exception hierarchy shared by all coolish modules."""


class CoolishError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(CoolishError, ValueError):
    pass


class RankDeficient(CoolishError, ValueError):
    pass


class DegenerateSample(CoolishError, ValueError):
    pass


class IllPosed(CoolishError, ValueError):
    pass


class InvalidBound(CoolishError, ValueError):
    pass


class InvalidConfig(CoolishError, ValueError):
    pass


class EmptyCell(CoolishError, ValueError):
    pass


class StageError(CoolishError, ValueError):
    pass


class NoConvergence(CoolishError, RuntimeError):
    """Raised when an iterative solver exhausts its budget.

    The best iterate found is attached as ``solution`` so callers can decide
    whether it is good enough.
    """

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution
