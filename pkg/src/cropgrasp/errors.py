"""Exception hierarchy shared by every stage of the pipeline."""


class CropGraspError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(CropGraspError, ValueError):
    pass


class OddDimension(CropGraspError, ValueError):
    pass


class NotScalar(CropGraspError, ValueError):
    pass


class NonFiniteValue(CropGraspError, ValueError):
    pass


class DomainError(CropGraspError, ValueError):
    pass


class MissingGradient(CropGraspError, RuntimeError):
    pass


class EmptyDataset(CropGraspError, ValueError):
    pass


class ConfigInvalid(CropGraspError, ValueError):
    pass


class EmptyMask(CropGraspError, ValueError):
    pass


class DegenerateCrop(CropGraspError, ValueError):
    pass


class DegenerateBox(CropGraspError, ValueError):
    pass


class NoDetections(CropGraspError, ValueError):
    pass


class MissingMean(CropGraspError, ValueError):
    pass


class IoFailure(CropGraspError, OSError):
    pass


class FormatVersionMismatch(CropGraspError, ValueError):
    pass
