"""The mutable topic model: build topics from cluster assignments and apply
modifications (merge, delete, three split variants, global keyword topics).

Every modification produces a new TopicModelState with version+1 and an
appended ModificationRecord; replaying the history from the initial
assignment reproduces the current partition exactly. Affected topics get
their centroids, top-words and (when a namer is wired) title/description
recomputed after each change.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .clustering import ClusterAssignment, hdbscan_cluster, kmeans_cluster, resolve_noise
from .corpus import Corpus
from .embedding import EmbeddingProviderConfig, cosine_similarity
from .errors import (
    EmptyKeyword,
    InvalidTopicIndex,
    LastTopic,
    NeedAtLeastTwo,
    NoCandidates,
    TooFewDocuments,
)
from .reduction import ReducerConfig
from .topwords import TopwordList, ctfidf_topwords, cosine_topwords

logger = logging.getLogger(__name__)


def auto_min_cluster_size(n_docs: int) -> int:
    """Default HDBSCAN minimum cluster size, scaling with corpus size."""
    return max(15, n_docs // 500)


@dataclass(frozen=True)
class ModelConfig:
    """Snapshot of everything needed to rebuild providers for a fitted model."""

    embedding: EmbeddingProviderConfig = field(default_factory=EmbeddingProviderConfig)
    reducer: ReducerConfig = field(default_factory=ReducerConfig)
    llm: dict | None = None              # raw chat-provider config; the llm module interprets it
    n_topics: int | None = None
    min_cluster_size: int | None = None  # None -> auto_min_cluster_size
    compute_cosine_topwords: bool = True
    split_seed: int = 0                  # default seed for chat-triggered k-means splits

    def to_dict(self) -> dict:
        return {
            "embedding": self.embedding.to_dict(),
            "reducer": self.reducer.to_dict(),
            "llm": self.llm,
            "n_topics": self.n_topics,
            "min_cluster_size": self.min_cluster_size,
            "compute_cosine_topwords": self.compute_cosine_topwords,
            "split_seed": self.split_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["embedding"] = EmbeddingProviderConfig.from_dict(d["embedding"])
        d["reducer"] = ReducerConfig.from_dict(d["reducer"])
        return cls(**d)


@dataclass(frozen=True)
class Topic:
    index: int
    title: str
    description: str
    doc_ids: frozenset[int]
    centroid_full: np.ndarray
    centroid_reduced: np.ndarray
    topwords_tfidf: TopwordList
    topwords_cosine: TopwordList | None = None

    @property
    def size(self) -> int:
        return len(self.doc_ids)

    def with_index(self, index: int) -> "Topic":
        return self if index == self.index else replace(self, index=index)


@dataclass(frozen=True)
class ModificationRecord:
    kind: str             # merge | delete | split_kmeans | split_hdbscan | split_keyword | create_keyword
    params: dict
    affected_before: tuple[int, ...]
    affected_after: tuple[int, ...]
    timestamp: float
    noop: bool = False

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": self.params,
            "affected_before": list(self.affected_before),
            "affected_after": list(self.affected_after),
            "timestamp": self.timestamp,
            "noop": self.noop,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModificationRecord":
        return cls(kind=d["kind"], params=d["params"],
                   affected_before=tuple(d["affected_before"]),
                   affected_after=tuple(d["affected_after"]),
                   timestamp=d["timestamp"], noop=d["noop"])


class TopicModelState:
    """The fitted model: corpus handle, matrices, topics, config, history.

    Single-writer / multi-reader: modification functions return a new state
    and never mutate the old one, so readers can keep using the last
    committed instance.
    """

    def __init__(self, corpus: Corpus, full_matrix: np.ndarray,
                 reduced_matrix: np.ndarray, topics: list[Topic],
                 config: ModelConfig, initial_labels: np.ndarray,
                 version: int = 0, history: tuple[ModificationRecord, ...] = (),
                 reducer_model=None, embedder=None, namer=None):
        self.corpus = corpus
        self.full_matrix = full_matrix
        self.reduced_matrix = reduced_matrix
        self.topics = list(topics)
        self.config = config
        self.initial_labels = np.asarray(initial_labels, dtype=np.int64)
        self.version = version
        self.history = tuple(history)
        self.reducer_model = reducer_model
        self.embedder = embedder          # runtime handle, not serialized
        self.namer = namer                # optional (TopwordList, index) -> (title, description)

    # -- read helpers -------------------------------------------------------

    def topic(self, index) -> Topic:
        try:
            idx = int(index)
        except (TypeError, ValueError):
            raise InvalidTopicIndex(index, len(self.topics)) from None
        if isinstance(index, bool) or idx != index or not (0 <= idx < len(self.topics)):
            raise InvalidTopicIndex(index, len(self.topics))
        return self.topics[idx]

    def partition(self) -> list[frozenset[int]]:
        return [t.doc_ids for t in self.topics]

    def partition_labels(self) -> np.ndarray:
        labels = np.full(len(self.corpus), -1, dtype=np.int64)
        for t in self.topics:
            labels[sorted(t.doc_ids)] = t.index
        return labels

    def _require_embedder(self):
        if self.embedder is None:
            from .embedding import build_embedder
            self.embedder = build_embedder(self.config.embedding)
        return self.embedder

    def _successor(self, topics: list[Topic], record: ModificationRecord) -> "TopicModelState":
        return TopicModelState(
            corpus=self.corpus, full_matrix=self.full_matrix,
            reduced_matrix=self.reduced_matrix, topics=topics, config=self.config,
            initial_labels=self.initial_labels, version=self.version + 1,
            history=self.history + (record,), reducer_model=self.reducer_model,
            embedder=self.embedder, namer=self.namer)


# --- topic construction -----------------------------------------------------


def _centroid(matrix: np.ndarray, doc_ids) -> np.ndarray:
    rows = np.asarray(matrix)[sorted(doc_ids)]
    return rows.mean(axis=0, dtype=np.float64)


def _cosine_list(state: TopicModelState, doc_ids, centroid_full) -> TopwordList | None:
    """Cosine top-words over words appearing in >= 2 of the topic's documents."""
    if not state.config.compute_cosine_topwords:
        return None
    token_sets = state.corpus.token_sets()
    counts: dict[str, int] = {}
    for did in doc_ids:
        for w in token_sets[did]:
            counts[w] = counts.get(w, 0) + 1
    candidates = sorted(w for w, c in counts.items() if c >= 2)
    if not candidates:
        return None
    embedder = state._require_embedder()
    vectors = embedder.embed_texts(candidates)
    vocab_embeddings = dict(zip(candidates, vectors))
    try:
        return cosine_topwords(vocab_embeddings, centroid_full, candidates,
                               count=len(candidates))
    except NoCandidates:
        return None


def _build_topic(state: TopicModelState, index: int, doc_ids,
                 partition: list) -> Topic:
    """Assemble one Topic: centroids, both top-word lists, placeholder name."""
    doc_ids = frozenset(int(d) for d in doc_ids)
    centroid_full = _centroid(state.full_matrix, doc_ids)
    centroid_reduced = _centroid(state.reduced_matrix, doc_ids)
    tfidf = ctfidf_topwords(state.corpus, partition, index)
    cosine = _cosine_list(state, doc_ids, centroid_full)
    return Topic(index=index, title=f"Topic {index}", description="",
                 doc_ids=doc_ids, centroid_full=centroid_full,
                 centroid_reduced=centroid_reduced, topwords_tfidf=tfidf,
                 topwords_cosine=cosine)


def _name_topic(state: TopicModelState, topic: Topic) -> Topic:
    if state.namer is None:
        return topic
    title, description = state.namer(topic.topwords_tfidf, topic.index)
    return replace(topic, title=title or f"Topic {topic.index}",
                   description=description)


def _rebuild(state: TopicModelState, doc_id_groups: list, name_indices: set[int],
             keep: dict[int, Topic]) -> list[Topic]:
    """Build the new topic list for a partition laid out as ``doc_id_groups``.

    Positions in ``keep`` reuse the existing Topic (index adjusted only);
    all other positions are rebuilt and, when listed in ``name_indices``,
    renamed through the state's namer.
    """
    partition = [sorted(g) for g in doc_id_groups]
    out: list[Topic] = []
    for i, group in enumerate(doc_id_groups):
        if i in keep:
            out.append(keep[i].with_index(i))
        else:
            topic = _build_topic(state, i, group, partition)
            if i in name_indices:
                topic = _name_topic(state, topic)
            out.append(topic)
    return out


def build_topics(corpus: Corpus, full_matrix: np.ndarray, reduced_matrix: np.ndarray,
                 assignment: ClusterAssignment, config: ModelConfig | None = None,
                 reducer_model=None, embedder=None, namer=None) -> TopicModelState:
    """Create the version-0 state from a noise-free cluster assignment."""
    labels = assignment.labels
    if np.any(labels < 0):
        raise ValueError("assignment must be noise-free")
    config = config or ModelConfig()
    state = TopicModelState(
        corpus=corpus, full_matrix=full_matrix, reduced_matrix=reduced_matrix,
        topics=[], config=config, initial_labels=labels.copy(), version=0,
        reducer_model=reducer_model, embedder=embedder, namer=namer)
    groups = [np.where(labels == c)[0].tolist() for c in range(assignment.n_clusters)]
    if any(len(g) == 0 for g in groups):
        raise ValueError("assignment labels must be dense with non-empty clusters")
    state.topics = _rebuild(state, groups, name_indices=set(range(len(groups))), keep={})
    return state


# --- modification operators -------------------------------------------------


def _record(kind: str, params: dict, before, after, noop: bool = False) -> ModificationRecord:
    return ModificationRecord(kind=kind, params=params,
                              affected_before=tuple(before),
                              affected_after=tuple(after),
                              timestamp=time.time(), noop=noop)


def merge_topics(state: TopicModelState, indices) -> TopicModelState:
    """Combine the documents of all listed topics into a single topic placed
    at position min(indices); remaining topics keep their relative order."""
    idx = sorted({int(i) for i in indices})
    if len(idx) < 2:
        raise NeedAtLeastTwo(f"need at least two topics to merge, got {idx}")
    for i in idx:
        state.topic(i)
    target = idx[0]
    merged_docs = frozenset().union(*(state.topics[i].doc_ids for i in idx))

    # target is min(idx), so every earlier position survives and the merged
    # topic lands at exactly position `target`
    groups, keep = [], {}
    for i, topic in enumerate(state.topics):
        if i == target:
            groups.append(merged_docs)
        elif i in idx:
            continue
        else:
            keep[len(groups)] = topic
            groups.append(topic.doc_ids)
    topics = _rebuild(state, groups, name_indices={target}, keep=keep)
    record = _record("merge", {"indices": idx}, before=idx, after=[target])
    return state._successor(topics, record)


def delete_topic(state: TopicModelState, index: int) -> TopicModelState:
    """Delete a topic, moving each of its documents to the topic with the
    nearest centroid (cosine over full embeddings; ties to the lowest index)."""
    state.topic(index)
    if len(state.topics) < 2:
        raise LastTopic("cannot delete the only topic")
    index = int(index)
    survivors = [t for t in state.topics if t.index != index]
    centroids = [t.centroid_full for t in survivors]

    moved: dict[int, list[int]] = {i: [] for i in range(len(survivors))}
    for did in sorted(state.topics[index].doc_ids):
        sims = np.array([cosine_similarity(state.full_matrix[did], c) for c in centroids])
        moved[int(np.argmax(sims))].append(did)  # argmax ties to the lowest index

    groups, keep, receiving = [], {}, []
    for pos, topic in enumerate(survivors):
        if moved[pos]:
            groups.append(topic.doc_ids | frozenset(moved[pos]))
            receiving.append(pos)
        else:
            keep[pos] = topic
            groups.append(topic.doc_ids)
    topics = _rebuild(state, groups, name_indices=set(receiving), keep=keep)
    record = _record("delete", {"index": index}, before=[index], after=receiving)
    return state._successor(topics, record)


def _replace_with_subtopics(state: TopicModelState, index: int,
                            sub_assignment: ClusterAssignment,
                            record: ModificationRecord) -> TopicModelState:
    """First sub-topic takes the split topic's position, the rest append."""
    doc_ids = np.array(sorted(state.topics[index].doc_ids))
    sub_groups = [doc_ids[sub_assignment.labels == c].tolist()
                  for c in range(sub_assignment.n_clusters)]
    groups, keep = [], {}
    for i, topic in enumerate(state.topics):
        if i == index:
            groups.append(sub_groups[0])
        else:
            keep[len(groups)] = topic
            groups.append(topic.doc_ids)
    tail_start = len(groups)
    groups.extend(sub_groups[1:])
    new_indices = [index] + list(range(tail_start, len(groups)))
    record = replace(record, affected_after=tuple(new_indices))
    topics = _rebuild(state, groups, name_indices=set(new_indices), keep=keep)
    return state._successor(topics, record)


def split_topic_kmeans(state: TopicModelState, index: int, n_clusters: int,
                       seed: int = 0) -> TopicModelState:
    """Split one topic by k-means over its reduced-space embeddings."""
    topic = state.topic(index)
    if n_clusters < 2:
        raise ValueError("n_clusters must be >= 2")
    if topic.size < n_clusters:
        raise TooFewDocuments(
            f"topic {index} has {topic.size} documents, needs >= {n_clusters}")
    points = state.reduced_matrix[sorted(topic.doc_ids)]
    sub = kmeans_cluster(points, n_clusters, seed=seed)
    record = _record("split_kmeans",
                     {"index": int(index), "n_clusters": int(n_clusters), "seed": int(seed)},
                     before=[index], after=[])
    return _replace_with_subtopics(state, int(index), sub, record)


def split_topic_hdbscan(state: TopicModelState, index: int,
                        min_cluster_size: int) -> TopicModelState:
    """Split one topic by HDBSCAN over its reduced-space embeddings; a
    single-cluster outcome is a recorded no-op."""
    topic = state.topic(index)
    if topic.size < 2 * min_cluster_size:
        raise TooFewDocuments(
            f"topic {index} has {topic.size} documents, needs >= {2 * min_cluster_size}")
    points = state.reduced_matrix[sorted(topic.doc_ids)]
    sub = resolve_noise(points, hdbscan_cluster(points, min_cluster_size))
    params = {"index": int(index), "min_cluster_size": int(min_cluster_size)}
    if sub.n_clusters == 1:
        record = _record("split_hdbscan", params, before=[index], after=[index], noop=True)
        return state._successor(list(state.topics), record)
    record = _record("split_hdbscan", params, before=[index], after=[])
    return _replace_with_subtopics(state, int(index), sub, record)


def split_topic_keyword(state: TopicModelState, index: int, keyword: str) -> TopicModelState:
    """Move the topic's documents that are strictly closer (by cosine) to the
    keyword's embedding than to the topic centroid into a new topic.

    The centroid is the one computed before any removal; an empty or total
    move is a recorded no-op.
    """
    topic = state.topic(index)
    if not keyword or not keyword.strip():
        raise EmptyKeyword("keyword must be non-empty")
    query = np.asarray(state._require_embedder().embed_text(keyword), dtype=np.float64)
    centroid = topic.centroid_full
    moved = [did for did in sorted(topic.doc_ids)
             if cosine_similarity(state.full_matrix[did], query)
             > cosine_similarity(state.full_matrix[did], centroid)]
    params = {"index": int(index), "keyword": keyword}
    if not moved or len(moved) == topic.size:
        record = _record("split_keyword", params, before=[index], after=[index], noop=True)
        return state._successor(list(state.topics), record)

    groups, keep = [], {}
    for i, t in enumerate(state.topics):
        if i == index:
            groups.append(t.doc_ids - frozenset(moved))
        else:
            keep[i] = t
            groups.append(t.doc_ids)
    groups.append(frozenset(moved))
    new_index = len(groups) - 1
    record = _record("split_keyword", params, before=[index], after=[index, new_index])
    topics = _rebuild(state, groups, name_indices={index, new_index}, keep=keep)
    return state._successor(topics, record)


def create_topic_keyword(state: TopicModelState, keyword: str) -> TopicModelState:
    """Create a global keyword topic: every document strictly closer to the
    keyword's embedding than to its own topic's centroid moves to the new
    topic. Centroids are snapshotted before the operation; emptied topics
    are removed; no qualifying document is a recorded no-op."""
    if not keyword or not keyword.strip():
        raise EmptyKeyword("keyword must be non-empty")
    query = np.asarray(state._require_embedder().embed_text(keyword), dtype=np.float64)

    moved: list[int] = []
    losers: list[int] = []
    remaining: list[frozenset[int]] = []
    for t in state.topics:
        taken = [did for did in sorted(t.doc_ids)
                 if cosine_similarity(state.full_matrix[did], query)
                 > cosine_similarity(state.full_matrix[did], t.centroid_full)]
        if taken:
            losers.append(t.index)
            moved.extend(taken)
        remaining.append(t.doc_ids - frozenset(taken))

    params = {"keyword": keyword}
    if not moved:
        record = _record("create_keyword", params, before=[], after=[], noop=True)
        return state._successor(list(state.topics), record)

    groups, keep = [], {}
    for i, t in enumerate(state.topics):
        if not remaining[i]:
            continue  # emptied topic drops out
        if i not in losers:
            keep[len(groups)] = t
        groups.append(remaining[i])
    groups.append(frozenset(sorted(moved)))
    new_index = len(groups) - 1
    affected_after = [i for i in range(len(groups) - 1) if i not in keep] + [new_index]
    record = _record("create_keyword", params, before=losers, after=affected_after)
    topics = _rebuild(state, groups, name_indices=set(affected_after), keep=keep)
    return state._successor(topics, record)


# --- history replay ----------------------------------------------------------


def apply_record(state: TopicModelState, record: ModificationRecord) -> TopicModelState:
    p = record.params
    if record.kind == "merge":
        return merge_topics(state, p["indices"])
    if record.kind == "delete":
        return delete_topic(state, p["index"])
    if record.kind == "split_kmeans":
        return split_topic_kmeans(state, p["index"], p["n_clusters"], p["seed"])
    if record.kind == "split_hdbscan":
        return split_topic_hdbscan(state, p["index"], p["min_cluster_size"])
    if record.kind == "split_keyword":
        return split_topic_keyword(state, p["index"], p["keyword"])
    if record.kind == "create_keyword":
        return create_topic_keyword(state, p["keyword"])
    raise ValueError(f"unknown modification kind {record.kind!r}")


def replay_history(state: TopicModelState) -> np.ndarray:
    """Re-apply the history from the initial assignment; returns the final
    per-document topic labels. Naming is skipped (LLM text is not replayed)."""
    n_clusters = int(state.initial_labels.max()) + 1
    base = build_topics(
        state.corpus, state.full_matrix, state.reduced_matrix,
        ClusterAssignment(labels=state.initial_labels.copy(), n_clusters=n_clusters),
        config=replace(state.config, compute_cosine_topwords=False),
        embedder=state.embedder, namer=None)
    cur = base
    for record in state.history:
        cur = apply_record(cur, record)
    return cur.partition_labels()
