"""Top-word extraction per topic.

Two rankings: class-based TF-IDF over each topic's concatenated documents,
and cosine similarity of vocabulary-word embeddings to the topic centroid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .corpus import Corpus
from .embedding import cosine_similarity
from .errors import EmptyTopic, NoCandidates

NAMING_WORD_COUNT = 500  # top-words handed to the LLM for titling


@dataclass(frozen=True)
class TopwordList:
    """Ranked (word, score) pairs, descending score, ties lexicographic."""

    method: str                              # "tfidf" | "cosine"
    entries: tuple[tuple[str, float], ...]

    def words(self) -> list[str]:
        return [w for w, _ in self.entries]

    def top(self, count: int) -> "TopwordList":
        return TopwordList(method=self.method, entries=self.entries[:count])

    def to_json(self) -> dict:
        return {"method": self.method, "words": [[w, s] for w, s in self.entries]}

    @classmethod
    def from_json(cls, d: dict) -> "TopwordList":
        return cls(method=d["method"], entries=tuple((w, s) for w, s in d["words"]))


def _ranked(scores: dict[str, float], method: str, count: int | None) -> TopwordList:
    ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    if count is not None:
        ordered = ordered[:count]
    return TopwordList(method=method, entries=tuple(ordered))


def ctfidf_topwords(corpus: Corpus, topic_doc_ids, topic_index: int,
                    count: int | None = None) -> TopwordList:
    """Class-based TF-IDF ranking for one topic of a full partition.

    score(w, t) = tf(w, t) * log(1 + A / f(w)) with
    tf(w, t) = occurrences of w in topic t / total tokens in topic t,
    f(w) = corpus frequency of w, and A = mean token count per topic.
    Only words occurring in the topic are scored (score 0 words are omitted).

    Raises:
        EmptyTopic: the addressed topic has no documents.
    """
    if not (0 <= topic_index < len(topic_doc_ids)):
        raise ValueError(f"topic_index {topic_index} out of range")
    doc_ids = sorted(topic_doc_ids[topic_index])
    if not doc_ids:
        raise EmptyTopic(f"topic {topic_index} is empty")

    total_corpus_tokens = sum(corpus.token_counts_per_doc)
    mean_tokens_per_topic = total_corpus_tokens / len(topic_doc_ids)

    counts: dict[str, int] = {}
    topic_tokens = 0
    for did in doc_ids:
        for tok in corpus.documents[did].tokens:
            counts[tok] = counts.get(tok, 0) + 1
            topic_tokens += 1
    if topic_tokens == 0:
        return TopwordList(method="tfidf", entries=())

    scores = {
        w: (c / topic_tokens) * math.log(1.0 + mean_tokens_per_topic
                                         / corpus.vocabulary.corpus_frequency(w))
        for w, c in counts.items()
    }
    return _ranked(scores, "tfidf", count)


def cosine_topwords(vocab_embeddings: dict[str, list[float]], topic_centroid_full,
                    candidate_words, count: int) -> TopwordList:
    """Rank candidate words by cosine similarity of their embedding to the
    topic centroid; top ``count`` returned.

    Raises:
        NoCandidates: the candidate set is empty.
    """
    candidates = sorted(candidate_words)
    if not candidates:
        raise NoCandidates("no candidate words")
    missing = [w for w in candidates if w not in vocab_embeddings]
    if missing:
        raise ValueError(f"candidates missing embeddings: {missing[:5]}")
    scores = {w: cosine_similarity(vocab_embeddings[w], topic_centroid_full)
              for w in candidates}
    return _ranked(scores, "cosine", count)


def topwords_for_naming(topic, count: int = NAMING_WORD_COUNT) -> TopwordList:
    """The tfidf list truncated to min(count, available) entries."""
    return topic.topwords_tfidf.top(count)
