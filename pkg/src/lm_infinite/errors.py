"""Shared exception taxonomy.

ValueError covers plain invalid arguments; the classes here mark failure
modes callers may want to catch specifically.
"""

from __future__ import annotations


class NanDetectedError(RuntimeError):
    """A NaN appeared in an attention input or a forward activation.

    The message names the first offending row (and layer, when raised from
    the model) so length-induced blowups can be localized.
    """


class CacheStateError(RuntimeError):
    """A KV-cache operation was called out of protocol order."""


class CorpusFormatError(ValueError):
    """A corpus file failed to parse; message carries line/byte location."""


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite; message carries the step index."""
