class Med3DError(Exception):
    pass


# Volume / manifest ingestion

class BadMagic(Med3DError):
    pass


class BadHeader(Med3DError):
    pass


class UnsupportedDtype(Med3DError):
    pass


class TruncatedFile(Med3DError):
    pass


class NonFiniteVoxel(Med3DError):
    pass


class NonPositiveSpacing(Med3DError):
    pass


class IoFailure(Med3DError):
    pass


class ParseError(Med3DError):

    def __init__(self, message, line=None):

        self.line = line
        if line is not None:
            message = 'line {}: {}'.format(line, message)
        super().__init__(message)


class DuplicateDomainId(Med3DError):
    pass


class EmptyDomain(Med3DError):
    pass


# Preprocessing

class EmptyList(Med3DError):
    pass


class NonPositiveTarget(Med3DError):
    pass


class NoForeground(Med3DError):
    pass


class RatingOutOfRange(Med3DError):
    pass


# Tensor engine and models

class ShapeMismatch(Med3DError, ValueError):
    pass


class TargetOutOfRange(Med3DError, ValueError):
    pass


class NotScalar(Med3DError, ValueError):
    pass


class InvalidDepth(Med3DError, ValueError):
    pass


class DuplicateBranch(Med3DError, ValueError):
    pass


class UnknownDomain(Med3DError, KeyError):
    pass


class ArchMismatch(Med3DError):
    pass


class BadCheckpoint(Med3DError):
    pass


# Training and metrics

class EmptyAfterFraction(Med3DError):
    pass


class EmptyMask(Med3DError, ValueError):
    pass


class EmptyInput(Med3DError, ValueError):
    pass


class NonFiniteTensor(Med3DError, FloatingPointError):
    pass
