"""Flat and nested medical NER over a word-pair grid.

The heavy lifting lives in the C++ extension; this package re-exports the
corpus utilities, the gradient-check suite and the training engine.
"""

from ._core import (
    ConfigError,
    DataError,
    Engine,
    Record,
    gradcheck,
    load_corpus,
    query_for,
    stats_json,
    stats_markdown,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "Engine",
    "Record",
    "gradcheck",
    "load_corpus",
    "query_for",
    "stats_json",
    "stats_markdown",
    "__version__",
]
