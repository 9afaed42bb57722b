"""Corpus ingestion: tokenization, vocabulary construction, document table.

A Corpus is immutable after construction; every other module refers to
documents by their dense integer id (= position in ingestion order).
"""

from __future__ import annotations

import json
import logging
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path

from .errors import EmptyCorpus, EmptyDocument

logger = logging.getLogger(__name__)

DEFAULT_MIN_TOKEN_LEN = 3

# Below this corpus size topic quality degrades noticeably; we warn, never fail.
SMALL_CORPUS_THRESHOLD = 10_000

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)  # runs of unicode alphanumerics


def load_default_stopwords() -> set[str]:
    """Stopword list shipped with the package, one token per line."""
    path = Path(__file__).parent / "data" / "stopwords.txt"
    return load_stopwords(path)


def load_stopwords(path: str | Path) -> set[str]:
    """Read a stopword file: one token per line, UTF-8, blank lines ignored."""
    with open(path, encoding="utf-8") as f:
        return {line.strip() for line in f if line.strip()}


def tokenize(text: str, min_token_len: int = DEFAULT_MIN_TOKEN_LEN,
             stopwords: set[str] | frozenset[str] | None = None) -> list[str]:
    """Lowercase and split on unicode non-alphanumeric boundaries.

    Drops tokens shorter than ``min_token_len`` and tokens in ``stopwords``.
    Deterministic; an empty result is allowed.
    """
    stopwords = stopwords or set()
    text = unicodedata.normalize("NFC", text).lower()
    return [t for t in _TOKEN_RE.findall(text)
            if len(t) >= min_token_len and t not in stopwords]


@dataclass(frozen=True)
class Document:
    """One corpus text with its tokenization and stable id."""

    id: int
    text: str
    tokens: tuple[str, ...]


@dataclass(frozen=True)
class VocabEntry:
    token_id: int
    corpus_frequency: int      # total occurrences across the corpus
    document_frequency: int    # number of documents containing the token


@dataclass(frozen=True)
class Vocabulary:
    """Token statistics over the whole corpus; token ids are dense 0..V-1."""

    entries: dict[str, VocabEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, token: str) -> bool:
        return token in self.entries

    def corpus_frequency(self, token: str) -> int:
        return self.entries[token].corpus_frequency

    def document_frequency(self, token: str) -> int:
        return self.entries[token].document_frequency


@dataclass(frozen=True)
class Corpus:
    """Immutable document table plus vocabulary; safe for concurrent reads."""

    documents: tuple[Document, ...]
    vocabulary: Vocabulary
    token_counts_per_doc: tuple[int, ...]
    min_token_len: int
    stopwords: frozenset[str]
    warnings: tuple[str, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.documents)

    def texts(self) -> list[str]:
        return [d.text for d in self.documents]

    def token_sets(self) -> list[frozenset[str]]:
        """Per-document distinct-token sets (cached)."""
        cached = getattr(self, "_token_sets", None)
        if cached is None:
            cached = [frozenset(d.tokens) for d in self.documents]
            object.__setattr__(self, "_token_sets", cached)
        return cached


def ingest_corpus(texts: list[str] | tuple[str, ...],
                  min_token_len: int = DEFAULT_MIN_TOKEN_LEN,
                  stopwords: set[str] | None = None) -> Corpus:
    """Build a Corpus from raw texts.

    One Document per input text, in order; the vocabulary covers all tokens
    surviving filtering. Emits a warning record (not an error) when the
    corpus is smaller than SMALL_CORPUS_THRESHOLD documents.

    Raises:
        EmptyCorpus: when ``texts`` is empty.
        EmptyDocument: when a text trims to the empty string.
    """
    if len(texts) == 0:
        raise EmptyCorpus("no input texts")
    if stopwords is None:
        stopwords = load_default_stopwords()
    stopwords = frozenset(stopwords)
    if min_token_len < 1:
        raise ValueError(f"min_token_len must be >= 1, got {min_token_len}")

    documents: list[Document] = []
    corpus_freq: dict[str, int] = {}
    doc_freq: dict[str, int] = {}
    token_counts: list[int] = []
    for i, text in enumerate(texts):
        if not text.strip():
            raise EmptyDocument(i)
        tokens = tokenize(text, min_token_len, stopwords)
        documents.append(Document(id=i, text=text, tokens=tuple(tokens)))
        token_counts.append(len(tokens))
        for t in tokens:
            corpus_freq[t] = corpus_freq.get(t, 0) + 1
        for t in set(tokens):
            doc_freq[t] = doc_freq.get(t, 0) + 1

    # dense token ids in first-appearance-agnostic (sorted) order, reproducible
    entries = {
        tok: VocabEntry(token_id=tid, corpus_frequency=corpus_freq[tok],
                        document_frequency=doc_freq[tok])
        for tid, tok in enumerate(sorted(corpus_freq))
    }

    warnings: list[str] = []
    if len(texts) < SMALL_CORPUS_THRESHOLD:
        msg = (f"corpus has {len(texts)} documents; topic quality is best "
               f"with more than {SMALL_CORPUS_THRESHOLD:,}")
        warnings.append(msg)
        logger.warning(msg)

    return Corpus(
        documents=tuple(documents),
        vocabulary=Vocabulary(entries=entries),
        token_counts_per_doc=tuple(token_counts),
        min_token_len=min_token_len,
        stopwords=stopwords,
        warnings=tuple(warnings),
    )


def read_corpus_file(path: str | Path) -> list[str]:
    """Load input texts from a file.

    Accepted layouts: a JSON array of strings (``.json``), JSON-lines with a
    "text" field (``.jsonl``/``.ndjson``), or newline-delimited plain text
    (anything else; blank lines skipped).
    """
    path = Path(path)
    suffix = path.suffix.lower()
    raw = path.read_text(encoding="utf-8")
    if suffix == ".json":
        data = json.loads(raw)
        if not isinstance(data, list) or not all(isinstance(t, str) for t in data):
            raise ValueError(f"{path}: expected a JSON array of strings")
        return data
    if suffix in (".jsonl", ".ndjson"):
        texts = []
        for lineno, line in enumerate(raw.splitlines(), start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            if "text" not in record:
                raise ValueError(f"{path}:{lineno}: missing 'text' field")
            texts.append(record["text"])
        return texts
    return [line for line in raw.splitlines() if line.strip()]
