"""Shared exception types.

Everything raised on purpose by this package derives from MTKError so the
command line layer can catch one base class and turn it into a diagnostic.
"""

from __future__ import annotations


class MTKError(Exception):
    """Base class for errors raised by this package."""


class FormatError(MTKError):
    """A binary or JSON artifact is malformed.

    The message names the file offset (or field) where parsing failed.
    """


class UndefinedConditionalError(MTKError):
    """A conditional frequency was requested for an empty conditioning set."""
