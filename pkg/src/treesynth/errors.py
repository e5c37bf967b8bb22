"""Exception types shared by the DSL interpreters and the search."""

from __future__ import annotations


class InvalidStep(Exception):
    """A transition produced an invalid execution state.

    Both DSLs raise subclasses of this; the search treats any of them as the
    end of a rollout (or a discarded beam candidate).
    """


class VersionMismatch(ValueError):
    """A model or corpus was produced for a different action space / format."""


class CorruptFile(ValueError):
    """A serialized artifact could not be decoded."""
