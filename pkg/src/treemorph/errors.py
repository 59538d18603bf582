"""Exception hierarchy shared by every pipeline stage."""


class TreeMorphError(Exception):
    """Base class. ``exit_code`` is used by the command line driver."""

    exit_code = 4


class InputError(TreeMorphError):
    exit_code = 2


class GeometryError(TreeMorphError):
    exit_code = 3


class SolverError(TreeMorphError):
    exit_code = 4


class InvalidRotation(InputError):
    pass


class DegenerateInput(GeometryError):
    pass


class BehindCamera(GeometryError):
    pass


class DegenerateView(GeometryError):
    pass


class DegenerateConfiguration(GeometryError):
    pass


class InsufficientData(GeometryError):
    pass


class NoModelFound(GeometryError):
    pass


class MissingConstraint(InputError):
    pass


class OrderingViolation(GeometryError):
    pass


class EmptyTree(GeometryError):
    pass


class DisconnectedGraph(GeometryError):
    pass


class UnconstrainedParameter(GeometryError):
    pass


class BadInitialization(SolverError):
    pass


class Unsolvable(SolverError):
    pass


class BadSpec(InputError):
    pass


class OneSidedObjectWarning(UserWarning):
    """A semantic object has member observations from only one side."""
