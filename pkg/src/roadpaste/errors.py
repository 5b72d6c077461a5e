"""Exception hierarchy shared by all roadpaste modules."""


class RoadPasteError(Exception):
    """Base class for every error raised by this package."""


# dataset_io
class ManifestError(RoadPasteError):
    pass


class DanglingAnnotation(RoadPasteError):
    pass


class UnknownClass(RoadPasteError):
    pass


class MaskDimMismatch(RoadPasteError):
    pass


class MaskReadError(RoadPasteError):
    pass


class WriteError(RoadPasteError):
    def __init__(self, path, reason=""):
        self.path = str(path)
        super().__init__(f"cannot write {self.path}: {reason}" if reason else f"cannot write {self.path}")


# perspective
class NoRoad(RoadPasteError):
    pass


class TooFewImages(RoadPasteError):
    pass


# damage_bank
class EmptyBank(RoadPasteError):
    pass


# placement
class EmptyRoadMask(RoadPasteError):
    pass


# warp
class DegenerateQuad(RoadPasteError):
    pass


class ScaleOutOfRange(RoadPasteError):
    pass


class SingularSystem(RoadPasteError):
    pass


# blend
class NothingOnRoad(RoadPasteError):
    pass


class EmptyRegion(RoadPasteError):
    pass


class SolverDiverged(RoadPasteError):
    def __init__(self, residual, iterations):
        self.residual = float(residual)
        self.iterations = int(iterations)
        super().__init__(f"CG stopped after {iterations} iterations, relative residual {residual:.3e}")
