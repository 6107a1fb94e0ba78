"""Exception types shared across the package."""


class XModalError(Exception):
    """Base class for all xmodal errors."""


class NearZeroNorm(XModalError):
    """A vector that must be normalized has (near-)zero Euclidean norm."""


class DimensionMismatch(XModalError):
    """Array shapes are inconsistent with each other or with the config."""


class InvalidLabel(XModalError):
    """A class label falls outside [0, num_classes)."""


class NoValidClass(XModalError):
    """Every class in the batch has fewer than two instances."""


class ConflictingFlags(XModalError):
    """Mutually exclusive loss flags were enabled together."""


class BadConfig(XModalError):
    """A configuration value is missing, unknown, or out of range."""


class InsufficientData(XModalError):
    """The dataset cannot supply the requested batch composition."""


class FormatError(XModalError):
    """A data/checkpoint/config file is malformed; message carries line info."""


class VersionMismatch(XModalError):
    """A checkpoint file was written by an unsupported format version."""


class DivergenceDetected(XModalError):
    """Training produced a non-finite loss."""


class EmptyGallery(XModalError):
    """Ranking was requested against an empty gallery."""


class EmptyModality(XModalError):
    """A retrieval split contains no instances for some modality."""


class NonFiniteLoss(XModalError):
    """A finite-difference probe evaluated to a non-finite loss."""


class BadArgs(XModalError):
    """An argument violates a function's preconditions."""
