"""Exception hierarchy shared by every subsystem."""


class ShapeGraspError(Exception):
    """Base class; ``reason`` is the short tag recorded in trial logs."""

    @property
    def reason(self) -> str:
        return type(self).__name__


# geometry
class EmptyMesh(ShapeGraspError):
    pass


class ResolutionTooLow(ShapeGraspError):
    pass


class DegenerateBounds(ShapeGraspError):
    pass


class OutOfBounds(ShapeGraspError):
    pass


class IsoOutOfRange(ShapeGraspError):
    pass


class EmptySurface(ShapeGraspError):
    pass


class EmptyCloud(ShapeGraspError):
    pass


# sensing
class ObjectNotVisible(ShapeGraspError):
    pass


class NoMatch(ShapeGraspError):
    pass


class AmbiguousTie(ShapeGraspError):
    pass


# completion
class InsufficientPoints(ShapeGraspError):
    pass


class NoConvergence(ShapeGraspError):
    """Raised only by callers that treat a flagged result as fatal."""


# grasping
class NoGraspFound(ShapeGraspError):
    pass


class AllInfeasible(ShapeGraspError):
    pass


# harness
class PlacementFailed(ShapeGraspError):
    pass


class ObjectNotVisibleAlone(ShapeGraspError):
    pass


class ConfigError(ShapeGraspError):
    pass
