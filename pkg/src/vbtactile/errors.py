"""Exception hierarchy shared by all pipeline stages."""


class TactileError(Exception):
    """Base class for every error raised by :mod:`vbtactile`."""


# geometry
class NoConvergence(TactileError):
    pass


class Infeasible(TactileError):
    pass


class BehindCamera(TactileError):
    pass


class ParallelRays(TactileError):
    pass


class RankDeficient(TactileError):
    pass


class OutOfFrustum(TactileError):
    def __init__(self, message, markers=()):
        super().__init__(message)
        self.markers = tuple(markers)


# elasticity / forcesolve
class DegenerateElement(TactileError):
    pass


class SingularSystem(TactileError):
    pass


class DimensionMismatch(TactileError, ValueError):
    pass


class IllConditioned(TactileError):
    pass


class DegenerateAxis(TactileError):
    pass


# contact / friction
class DegenerateNeighborhood(TactileError):
    pass


class ZeroNormalForce(TactileError):
    pass


class FrameMismatch(TactileError):
    pass


# simulator
class ContactLost(TactileError):
    def __init__(self, message, frame=None):
        super().__init__(message)
        self.frame = frame


# io
class IoFailure(TactileError, OSError):
    pass


class ParseError(TactileError):
    def __init__(self, message, line=None, field=None, frame=None):
        loc = []
        if frame is not None:
            loc.append(f"frame {frame}")
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.line = line
        self.field = field
        self.frame = frame


class VersionMismatch(TactileError):
    pass
