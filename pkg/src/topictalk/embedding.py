"""Embedding providers, on-disk cache, cosine similarity and exact k-NN.

Two providers: a remote OpenAI-compatible HTTP endpoint, and a fully
deterministic local embedder (hashed token n-grams, L2-normalized) that
lets the whole engine run offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import httpx
import numpy as np

from .errors import DimensionMismatch, EmptyCandidates, ProviderUnavailable, ZeroVector

logger = logging.getLogger(__name__)

LOCAL_DEFAULT_DIM = 256
RETRY_ATTEMPTS = 3
RETRY_BACKOFF_S = 1.0

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)


@dataclass(frozen=True)
class EmbeddingProviderConfig:
    """How to obtain embeddings; see ``build_embedder``."""

    kind: str = "local_deterministic"          # "remote" | "local_deterministic"
    endpoint_url: str | None = None            # remote only
    model_name: str = "hashed-ngram-v1"
    api_key_env_var: str | None = None         # remote only; key never stored
    batch_size: int = 64
    cache_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("remote", "local_deterministic"):
            raise ValueError(f"unknown provider kind {self.kind!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.kind == "remote" and not (self.endpoint_url and self.api_key_env_var):
            raise ValueError("remote provider requires endpoint_url and api_key_env_var")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "endpoint_url": self.endpoint_url,
            "model_name": self.model_name,
            "api_key_env_var": self.api_key_env_var,
            "batch_size": self.batch_size,
            "cache_path": self.cache_path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingProviderConfig":
        return cls(**d)


def _content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class EmbeddingCache:
    """Append-only (model_name, content-hash) -> vector cache.

    On-disk layout is JSON-lines, one record per line:
    ``{"model": str, "hash": str, "vector": [float, ...]}``.
    A corrupt trailing record (partial write) is truncated on load.
    Safe under concurrent insert/lookup.
    """

    def __init__(self, path: str | Path | None = None):
        self._lock = threading.Lock()
        self._mem: dict[tuple[str, str], list[float]] = {}
        self._path = Path(path) if path else None
        if self._path is not None and self._path.exists():
            self._load()

    def _load(self) -> None:
        raw = self._path.read_bytes()
        good_end = 0
        for line in raw.split(b"\n"):
            if not line:
                good_end += 1  # the newline itself
                continue
            try:
                rec = json.loads(line)
                self._mem[(rec["model"], rec["hash"])] = rec["vector"]
            except (json.JSONDecodeError, KeyError, TypeError):
                logger.warning("truncating corrupt trailing cache record in %s", self._path)
                break
            good_end += len(line) + 1
        good_end = min(good_end, len(raw))
        if good_end < len(raw):
            with open(self._path, "r+b") as f:
                f.truncate(good_end)

    def get(self, model: str, content_hash: str) -> list[float] | None:
        with self._lock:
            return self._mem.get((model, content_hash))

    def put(self, model: str, content_hash: str, vector: list[float]) -> None:
        with self._lock:
            if (model, content_hash) in self._mem:
                return
            self._mem[(model, content_hash)] = vector
            if self._path is not None:
                line = json.dumps({"model": model, "hash": content_hash, "vector": vector})
                with open(self._path, "a", encoding="utf-8") as f:
                    f.write(line + "\n")


def _local_dimension(model_name: str) -> int:
    """Dimension encoded as a trailing ``-<int>`` in the model name, else default."""
    m = re.search(r"-(\d+)$", model_name)
    return int(m.group(1)) if m else LOCAL_DEFAULT_DIM


class LocalDeterministicProvider:
    """Hashes token n-grams (unigrams + bigrams) into D buckets, L2-normalizes.

    Fully reproducible across runs and machines; no network.
    """

    def __init__(self, model_name: str = "hashed-ngram-v1"):
        self.model_name = model_name
        self.dimension = _local_dimension(model_name)
        self.request_count = 0

    def _features(self, text: str) -> list[str]:
        words = _WORD_RE.findall(text.lower())
        if not words:
            words = [text.strip().lower()]
        return words + [f"{a} {b}" for a, b in zip(words, words[1:])]

    def embed_batch(self, texts: list[str]) -> list[list[float]]:
        self.request_count += 1
        out = []
        for text in texts:
            vec = np.zeros(self.dimension, dtype=np.float64)
            for feat in self._features(text):
                h = int.from_bytes(
                    hashlib.blake2b(feat.encode("utf-8"), digest_size=8).digest(), "big")
                sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
                vec[h % self.dimension] += sign
            norm = float(np.linalg.norm(vec))
            if norm == 0.0:
                # all features cancelled; fall back to a single raw-text feature
                h = int.from_bytes(
                    hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")
                vec[h % self.dimension] = 1.0
                norm = 1.0
            out.append((vec / norm).tolist())
        return out


class RemoteProvider:
    """OpenAI-compatible embeddings endpoint.

    Wire shape: request ``{"model": str, "input": [str, ...]}``, response
    ``{"data": [{"embedding": [...]}, ...]}`` with one entry per input.
    Retries ``RETRY_ATTEMPTS`` times with exponential backoff.
    """

    def __init__(self, cfg: EmbeddingProviderConfig, transport: httpx.BaseTransport | None = None):
        self.cfg = cfg
        self.model_name = cfg.model_name
        self.dimension: int | None = None  # learned from the first response
        self.request_count = 0
        self._client = httpx.Client(timeout=30.0, transport=transport)
        self._sleep = time.sleep

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.cfg.api_key_env_var or "", "")
        return {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}

    def embed_batch(self, texts: list[str]) -> list[list[float]]:
        payload = {"model": self.cfg.model_name, "input": list(texts)}
        last_err: Exception | None = None
        for attempt in range(RETRY_ATTEMPTS):
            if attempt > 0:
                self._sleep(RETRY_BACKOFF_S * 2 ** (attempt - 1))
            self.request_count += 1
            try:
                resp = self._client.post(self.cfg.endpoint_url, json=payload,
                                         headers=self._headers())
                resp.raise_for_status()
                body = resp.json()
                vectors = [item["embedding"] for item in body["data"]]
            except (httpx.HTTPError, KeyError, TypeError, json.JSONDecodeError) as e:
                last_err = e
                logger.warning("embedding request failed (attempt %d/%d): %s",
                               attempt + 1, RETRY_ATTEMPTS, e)
                continue
            if len(vectors) != len(texts):
                raise ProviderUnavailable(
                    f"provider returned {len(vectors)} vectors for {len(texts)} inputs")
            return vectors
        raise ProviderUnavailable(f"embedding provider failed after "
                                  f"{RETRY_ATTEMPTS} attempts: {last_err}")


class Embedder:
    """Caching front-end over a provider; the embedding surface everyone uses."""

    def __init__(self, provider, model_name: str, cache: EmbeddingCache,
                 batch_size: int = 64):
        self.provider = provider
        self.model_name = model_name
        self.cache = cache
        self.batch_size = batch_size

    @property
    def request_count(self) -> int:
        return self.provider.request_count

    @property
    def dimension(self) -> int | None:
        return getattr(self.provider, "dimension", None)

    def embed_texts(self, texts: list[str]) -> list[list[float]]:
        """One vector per text, in order; cached by (model_name, content hash).

        Raises:
            ProviderUnavailable: network/HTTP failure after bounded retries.
            DimensionMismatch: provider returned inconsistent dimensions.
        """
        if len(texts) == 0:
            raise ValueError("texts must be non-empty")
        for i, t in enumerate(texts):
            if not t.strip():
                raise ValueError(f"text {i} is empty")

        hashes = [_content_hash(t) for t in texts]
        results: list[list[float] | None] = [
            self.cache.get(self.model_name, h) for h in hashes]
        missing = [i for i, r in enumerate(results) if r is None]

        # dedupe identical missing texts so each is requested once
        order: dict[str, list[int]] = {}
        for i in missing:
            order.setdefault(hashes[i], []).append(i)
        todo = list(order)
        for start in range(0, len(todo), self.batch_size):
            batch_hashes = todo[start:start + self.batch_size]
            batch_texts = [texts[order[h][0]] for h in batch_hashes]
            vectors = self.provider.embed_batch(batch_texts)
            for h, vec in zip(batch_hashes, vectors):
                self._check_vector(vec)
                self.cache.put(self.model_name, h, vec)
                for i in order[h]:
                    results[i] = vec

        dims = {len(v) for v in results}  # type: ignore[arg-type]
        if len(dims) != 1:
            raise DimensionMismatch(f"provider returned mixed dimensions {sorted(dims)}")
        return results  # type: ignore[return-value]

    def _check_vector(self, vec: list[float]) -> None:
        declared = self.dimension
        if declared is None:
            if hasattr(self.provider, "dimension"):
                self.provider.dimension = len(vec)
        elif len(vec) != declared:
            raise DimensionMismatch(
                f"provider returned dimension {len(vec)}, declared {declared}")
        if not np.all(np.isfinite(vec)):
            raise ProviderUnavailable("provider returned non-finite values")

    def embed_text(self, text: str) -> list[float]:
        return self.embed_texts([text])[0]


def build_embedder(cfg: EmbeddingProviderConfig,
                   transport: httpx.BaseTransport | None = None) -> Embedder:
    """Instantiate the provider named by ``cfg`` behind a cache."""
    cache = EmbeddingCache(cfg.cache_path)
    if cfg.kind == "local_deterministic":
        provider = LocalDeterministicProvider(cfg.model_name)
    else:
        provider = RemoteProvider(cfg, transport=transport)
    return Embedder(provider, cfg.model_name, cache, cfg.batch_size)


def embed_texts(cfg: EmbeddingProviderConfig, texts: list[str]) -> list[list[float]]:
    """Convenience one-shot wrapper around ``build_embedder``."""
    return build_embedder(cfg).embed_texts(texts)


def cosine_similarity(a, b) -> float:
    """a.b / (|a||b|), clamped to [-1, 1] against rounding.

    Raises:
        DimensionMismatch: unequal lengths.
        ZeroVector: either vector has zero norm.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity undefined for zero vectors")
    if np.array_equal(a, b):
        return 1.0  # exact self-similarity, free of rounding
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def knn_search(matrix: np.ndarray, candidate_ids, query, k: int) -> list[tuple[int, float]]:
    """Exact top-min(k, |candidates|) rows by cosine similarity to ``query``.

    Descending similarity; ties broken by ascending document id.

    Raises:
        EmptyCandidates: candidate set is empty.
        ZeroVector: the query has zero norm.
    """
    ids = np.array(sorted(candidate_ids), dtype=np.int64)
    if ids.size == 0:
        raise EmptyCandidates("no candidate documents")
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64)
    qn = float(np.linalg.norm(q))
    if qn == 0.0:
        raise ZeroVector("query vector has zero norm")
    sub = np.asarray(matrix, dtype=np.float64)[ids]
    norms = np.linalg.norm(sub, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    sims = np.clip(sub @ q / (safe * qn), -1.0, 1.0)
    sims[norms == 0.0] = -1.0  # zero rows rank last; matrices never contain them in practice
    order = np.lexsort((ids, -sims))[: min(k, ids.size)]
    return [(int(ids[i]), float(sims[i])) for i in order]
