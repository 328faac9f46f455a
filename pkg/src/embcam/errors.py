"""Exception hierarchy shared by every embcam module."""


class EmbcamError(Exception):
    """Base class for all errors raised by this package."""


# -- file formats ---------------------------------------------------------

class FormatError(EmbcamError, ValueError):
    pass


class BadMagic(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class UnsupportedDtype(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class NonFinite(FormatError):
    pass


# -- shapes and numerics --------------------------------------------------

class ShapeError(EmbcamError, ValueError):
    pass


ShapeMismatch = ShapeError


class ZeroNorm(EmbcamError, ArithmeticError):
    """Pre-normalization embedding is (numerically) the zero vector."""


class MissingParams(EmbcamError, ValueError):
    pass


# -- triplet sampling / aggregation ---------------------------------------

class NoPositives(EmbcamError):
    pass


class NoNegatives(EmbcamError):
    pass


class EmptyTriplets(EmbcamError, ValueError):
    pass


# -- database -------------------------------------------------------------

class AllExcluded(EmbcamError):
    pass


class EmptyDatabase(EmbcamError, ValueError):
    pass


class KTooLarge(EmbcamError, ValueError):
    pass


class FeatureReadError(EmbcamError):
    """A manifest record's feature file could not be loaded."""

    def __init__(self, record_id, cause):
        super().__init__(f"record {record_id}: cannot read features ({cause})")
        self.record_id = record_id
        self.cause = cause


# -- heatmaps -------------------------------------------------------------

class ChannelOutOfRange(EmbcamError, IndexError):
    pass


class AllZeroHeatmap(EmbcamError, ValueError):
    pass


class MissingRegion(EmbcamError, ValueError):
    pass


class EmptyForeground(EmbcamError, ValueError):
    pass
