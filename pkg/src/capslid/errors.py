"""Exception hierarchy shared by every stage of the pipeline."""


class CapsLidError(Exception):
    """Base class; the CLI maps any subclass to exit status 2."""


class MalformedWav(CapsLidError):
    pass


class UnsupportedFormat(CapsLidError):
    pass


class TooShort(CapsLidError):
    pass


class ShapeMismatch(CapsLidError, ValueError):
    pass


class NonScalarLoss(CapsLidError, ValueError):
    pass


class LabelOutOfRange(CapsLidError, ValueError):
    pass


class EmptyDataset(CapsLidError):
    pass


class NonFiniteLoss(CapsLidError, FloatingPointError):
    pass


class CheckpointError(CapsLidError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


class CalibrationInsufficient(CapsLidError):
    pass


class DegenerateClass(CapsLidError):
    pass
