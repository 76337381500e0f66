"""Embedding-bag mortality and length-of-stay models over multi-source ICU event streams."""

__version__ = "0.1.0"

from .errors import DataError
from .schema import ALL_SOURCES, SourceKind

__all__ = ["ALL_SOURCES", "DataError", "SourceKind", "__version__"]
