"""Exception types shared across the package."""


class QHybridError(Exception):
    pass


class ShapeError(QHybridError, ValueError):
    pass


class LengthMismatch(ShapeError):
    pass


class ShapeMismatch(ShapeError):
    pass


class QubitMismatch(ShapeError):
    pass


class ZeroNormInput(QHybridError, ValueError):
    pass


class InvalidBit(QHybridError, ValueError):
    pass


class WireOutOfRange(QHybridError, IndexError):
    pass


class DuplicateWires(QHybridError, ValueError):
    pass


class IndexOutOfRange(QHybridError, IndexError):
    pass


class TooManyQubits(QHybridError, ValueError):
    pass


class NoCachedForward(QHybridError, RuntimeError):
    pass


class LabelOutOfRange(QHybridError, ValueError):
    pass


class UnsupportedShape(QHybridError, ValueError):
    pass


class EmptySplit(QHybridError, ValueError):
    pass


class DegenerateInput(QHybridError, ValueError):
    pass


class DivergedLoss(QHybridError, FloatingPointError):
    pass


# file formats

class FormatError(QHybridError, ValueError):
    pass


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class CountMismatch(FormatError):
    pass


class VersionMismatch(FormatError):
    pass
