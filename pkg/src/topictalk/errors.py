"""Exception types shared across the package."""


class TopicTalkError(Exception):
    """Base class for all package errors."""


# --- corpus ---------------------------------------------------------------

class EmptyCorpus(TopicTalkError):
    """No input texts were supplied."""


class EmptyDocument(TopicTalkError):
    """An input text is empty after whitespace trimming."""

    def __init__(self, index: int):
        self.index = index
        super().__init__(f"document {index} is empty after trimming")


# --- embedding ------------------------------------------------------------

class ProviderUnavailable(TopicTalkError):
    """A remote provider failed after bounded retries."""


class DimensionMismatch(TopicTalkError):
    """Vector dimensions disagree where they must match."""


class ZeroVector(TopicTalkError):
    """Cosine similarity is undefined for a zero-norm vector."""


class EmptyCandidates(TopicTalkError):
    """k-NN search received an empty candidate set."""


# --- reduction ------------------------------------------------------------

class RankDeficient(TopicTalkError):
    """Input has fewer non-trivial components than the target dimension."""


# --- clustering -----------------------------------------------------------

class TooFewPoints(TopicTalkError):
    """Not enough points for the requested clustering."""


class KExceedsClusters(TopicTalkError):
    """Requested cluster count exceeds the number of existing clusters."""


# --- topwords -------------------------------------------------------------

class EmptyTopic(TopicTalkError):
    """The topic contains no documents."""


class NoCandidates(TopicTalkError):
    """No candidate words remain for ranking."""


# --- topicstore -----------------------------------------------------------

class InvalidTopicIndex(TopicTalkError):
    """Topic index out of range."""

    def __init__(self, index, n_topics: int | None = None):
        self.index = index
        msg = f"invalid topic index {index!r}"
        if n_topics is not None:
            msg += f" (have {n_topics} topics)"
        super().__init__(msg)


class NeedAtLeastTwo(TopicTalkError):
    """Merging needs at least two distinct topics."""


class LastTopic(TopicTalkError):
    """The only remaining topic cannot be deleted."""


class TooFewDocuments(TopicTalkError):
    """The topic is too small for the requested split."""


class EmptyKeyword(TopicTalkError):
    """Keyword operations need a non-empty keyword."""


# --- llm ------------------------------------------------------------------

class MalformedResponse(TopicTalkError):
    """The provider's response could not be parsed."""


class AmbiguousResponse(TopicTalkError):
    """The provider's response did not resolve to a single choice."""


class SameTopic(TopicTalkError):
    """Comparison needs two distinct topics."""


# --- persistence ----------------------------------------------------------

class CorruptState(TopicTalkError):
    """A persisted state file is damaged."""

    def __init__(self, message: str, byte_offset: int | None = None):
        self.byte_offset = byte_offset
        if byte_offset is not None:
            message = f"{message} (at byte {byte_offset})"
        super().__init__(message)


class SchemaVersionMismatch(TopicTalkError):
    """A persisted state was written by an incompatible schema version."""

    def __init__(self, found: int, expected: int):
        self.found = found
        self.expected = expected
        super().__init__(f"state schema version {found}, this reader expects {expected}")
