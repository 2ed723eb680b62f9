"""Exception hierarchy shared across the toolkit.

Everything raised on purpose derives from DvkError so callers (and the
CLI) can distinguish "your input is bad" from a genuine bug.
"""


class DvkError(Exception):
    """Base class for all structured toolkit errors."""


class FormatError(DvkError):
    """A serialized artifact violates its on-disk contract."""


class BadMagic(FormatError):
    pass


class BadDims(FormatError):
    pass


class BadFlags(FormatError):
    pass


class Truncated(FormatError):
    """File shorter (or longer) than its header implies."""


class NonFiniteValue(FormatError):
    pass


class ZeroNormPatch(FormatError):
    pass


class AttentionOutOfRange(FormatError):
    pass


class UnsortedVotes(FormatError):
    pass


class BadConfig(DvkError):
    pass


class MissingIndex(FormatError):
    pass


class BadIndex(FormatError):
    """index.jsonl is present but malformed or mis-ordered."""


class MissingFrame(FormatError):
    pass


class DimMismatch(DvkError):
    pass


class NoFrames(DvkError):
    pass


class MissingAttention(DvkError):
    pass


class TooFewPoints(DvkError):
    pass


class DegenerateBag(DvkError):
    pass


class ZeroNorm(DvkError):
    pass


class EmptyBatch(DvkError):
    pass


class Diverged(DvkError):
    pass


class PrototypeSamplingFailed(DvkError):
    pass


class DoesNotFit(DvkError):
    pass
