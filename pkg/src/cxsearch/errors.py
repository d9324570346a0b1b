"""Exception hierarchy shared by every cxsearch module."""

from __future__ import annotations


class CxSearchError(Exception):
    """Base class for all errors raised by cxsearch."""


# imaging
class DecodeError(CxSearchError):
    """Input bytes are not a decodable PNG or JPEG."""


class TooSmall(CxSearchError):
    """Image is smaller than the 32x32 patch size in either dimension."""


# signature
class InsufficientSamples(CxSearchError):
    pass


class EmptyDescriptorSet(CxSearchError):
    pass


class CorruptSignature(CxSearchError):
    pass


class CodebookMismatch(CxSearchError):
    """Two artifacts were built against different codebooks."""


class CorruptCodebook(CxSearchError):
    pass


# index
class DuplicateImageId(CxSearchError):
    pass


class CorruptIndex(CxSearchError):
    pass


class NoShardsAvailable(CxSearchError):
    pass


# localiser
class UnknownModel(CxSearchError):
    pass


class DetectorError(CxSearchError):
    pass


# pipeline
class EmptyCrop(CxSearchError):
    pass


class ConfigError(CxSearchError):
    pass
