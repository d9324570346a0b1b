"""Colour-texture visual search: descriptors, bag-of-words signatures, sharded inverted index and a search service."""

__version__ = "0.1.0"
