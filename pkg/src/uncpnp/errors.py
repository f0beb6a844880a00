"""Exception types raised across the package."""


class PnPError(Exception):
    """Base class for all pose-estimation failures."""


class Singular180(PnPError):
    """Rotation lies on the Cayley singularity (rotation angle of 180 degrees)."""


class DepthZero(PnPError):
    """A point lies on the camera's principal plane and cannot be projected."""


class DegenerateGeometry(PnPError):
    pass


class AllCandidatesBehindCamera(PnPError):
    pass


class TranslationGaugeDegenerate(PnPError):
    pass


class NoStationaryPoint(PnPError):
    pass


class NoConvergence(PnPError):
    pass


class DegenerateBaseline(PnPError):
    pass


class LevelOutOfRange(PnPError, ValueError):
    pass


class DegenerateTriple(PnPError):
    pass


class NoModelFound(PnPError):
    pass
