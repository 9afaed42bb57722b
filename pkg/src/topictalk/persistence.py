"""State persistence: a versioned JSON document plus flat binary embedding
files.

The JSON holds config, corpus texts, vocabulary, topics (doc ids and
top-words), reducer model and history. Embedding matrices live in sidecar
files of little-endian float32 with a 16-byte header (magic, N, D); sidecars
are content-addressed so a crash mid-save can never leave the primary JSON
pointing at mismatched data. The JSON itself is committed last via
write-temp-rename.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from pathlib import Path

import numpy as np

from .corpus import ingest_corpus
from .errors import CorruptState, SchemaVersionMismatch
from .reduction import model_from_dict
from .topicstore import ModelConfig, ModificationRecord, Topic, TopicModelState
from .topwords import TopwordList

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EMB_MAGIC = b"TTEMB01\n"  # 8 bytes; header = magic + uint32 N + uint32 D


def canonical_json_bytes(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False).encode("utf-8")


# Indirection points for the fault-injection tests: a simulated crash is an
# exception raised from one of these.

def _write_bytes(path: Path, data: bytes) -> None:
    with open(path, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())


def _replace(src: Path, dst: Path) -> None:
    os.replace(src, dst)


def _matrix_bytes(matrix: np.ndarray) -> bytes:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    header = EMB_MAGIC + struct.pack("<II", m.shape[0], m.shape[1])
    return header + m.tobytes()


def _read_matrix(path: Path) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CorruptState(f"embedding file missing: {path}") from None
    if len(raw) < 16 or raw[:8] != EMB_MAGIC:
        raise CorruptState(f"bad embedding header in {path}", byte_offset=0)
    n, d = struct.unpack("<II", raw[8:16])
    expected = 16 + n * d * 4
    if len(raw) != expected:
        raise CorruptState(
            f"embedding file {path} has {len(raw)} bytes, expected {expected}",
            byte_offset=min(len(raw), expected))
    return np.frombuffer(raw[16:], dtype="<f4").reshape(n, d).copy()


def _topic_to_dict(t: Topic) -> dict:
    return {
        "index": t.index,
        "title": t.title,
        "description": t.description,
        "doc_ids": sorted(t.doc_ids),
        "centroid_full": t.centroid_full.tolist(),
        "centroid_reduced": t.centroid_reduced.tolist(),
        "topwords_tfidf": t.topwords_tfidf.to_json(),
        "topwords_cosine": t.topwords_cosine.to_json() if t.topwords_cosine else None,
    }


def _topic_from_dict(d: dict) -> Topic:
    return Topic(
        index=d["index"], title=d["title"], description=d["description"],
        doc_ids=frozenset(d["doc_ids"]),
        centroid_full=np.array(d["centroid_full"], dtype=np.float64),
        centroid_reduced=np.array(d["centroid_reduced"], dtype=np.float64),
        topwords_tfidf=TopwordList.from_json(d["topwords_tfidf"]),
        topwords_cosine=(TopwordList.from_json(d["topwords_cosine"])
                         if d["topwords_cosine"] else None),
    )


def state_to_document(state: TopicModelState, full_name: str,
                      reduced_name: str) -> dict:
    vocab = {tok: [e.token_id, e.corpus_frequency, e.document_frequency]
             for tok, e in state.corpus.vocabulary.entries.items()}
    return {
        "schema_version": SCHEMA_VERSION,
        "config": state.config.to_dict(),
        "corpus": {
            "texts": [d.text for d in state.corpus.documents],
            "min_token_len": state.corpus.min_token_len,
            "stopwords": sorted(state.corpus.stopwords),
        },
        "vocabulary": vocab,
        "topics": [_topic_to_dict(t) for t in state.topics],
        "reducer_model": state.reducer_model.to_dict() if state.reducer_model else None,
        "history": [r.to_dict() for r in state.history],
        "initial_labels": state.initial_labels.tolist(),
        "version": state.version,
        "embeddings": {"full": full_name, "reduced": reduced_name},
    }


def save_state(state: TopicModelState, path: str | Path) -> None:
    """Persist atomically: content-addressed embedding sidecars first, then
    the primary JSON via write-temp-rename. A crash at any point leaves the
    previous state file intact and self-consistent."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sidecars = {}
    for tag, matrix in (("full", state.full_matrix), ("reduced", state.reduced_matrix)):
        data = _matrix_bytes(matrix)
        digest = hashlib.sha256(data).hexdigest()[:12]
        name = f"{tag}-{digest}.emb"  # content-addressed: shareable, never overwritten
        target = path.parent / name
        if not target.exists():
            tmp = path.parent / (name + ".tmp")
            _write_bytes(tmp, data)
            _replace(tmp, target)
        sidecars[tag] = name

    doc = state_to_document(state, sidecars["full"], sidecars["reduced"])
    tmp = path.parent / (path.name + ".tmp")
    _write_bytes(tmp, canonical_json_bytes(doc))
    _replace(tmp, path)
    logger.info("state v%d saved to %s", state.version, path)


def load_state(path: str | Path, embedder=None, namer=None) -> TopicModelState:
    """Rebuild a TopicModelState from disk.

    Raises:
        CorruptState: unreadable JSON or damaged/truncated embedding file.
        SchemaVersionMismatch: written by an incompatible schema.
    """
    path = Path(path)
    raw = path.read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise CorruptState(f"unparseable state file {path}: {e.msg}",
                           byte_offset=e.pos) from e
    found = doc.get("schema_version")
    if found != SCHEMA_VERSION:
        raise SchemaVersionMismatch(found, SCHEMA_VERSION)

    config = ModelConfig.from_dict(doc["config"])
    corpus = ingest_corpus(doc["corpus"]["texts"],
                           min_token_len=doc["corpus"]["min_token_len"],
                           stopwords=set(doc["corpus"]["stopwords"]))
    if len(corpus.vocabulary) != len(doc["vocabulary"]):
        raise CorruptState(
            f"vocabulary size {len(doc['vocabulary'])} does not match "
            f"re-tokenized corpus ({len(corpus.vocabulary)})")

    full = _read_matrix(path.parent / doc["embeddings"]["full"])
    reduced = _read_matrix(path.parent / doc["embeddings"]["reduced"])
    if full.shape[0] != len(corpus) or reduced.shape[0] != len(corpus):
        raise CorruptState("embedding row count does not match corpus size")

    reducer_model = (model_from_dict(doc["reducer_model"], train_points=full)
                     if doc["reducer_model"] else None)
    state = TopicModelState(
        corpus=corpus, full_matrix=full, reduced_matrix=reduced,
        topics=[_topic_from_dict(t) for t in doc["topics"]],
        config=config,
        initial_labels=np.array(doc["initial_labels"], dtype=np.int64),
        version=doc["version"],
        history=tuple(ModificationRecord.from_dict(r) for r in doc["history"]),
        reducer_model=reducer_model, embedder=embedder, namer=namer)
    return state
