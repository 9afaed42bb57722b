"""HTTP service and fit pipeline: the front door of the engine.

``fit`` runs embed -> reduce -> HDBSCAN -> noise resolution -> optional
Ward merge to a fixed topic count -> topic building and naming, then
persists the state atomically. ``create_app`` exposes the REST surface the
web chat consumes. Mutations are single-writer: a second concurrent
mutation receives 409.
"""

from __future__ import annotations

import logging
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from . import chatrouter, llm, topicstore
from .clustering import agglomerative_merge_to_k, hdbscan_cluster, resolve_noise
from .corpus import ingest_corpus, load_stopwords, read_corpus_file
from .embedding import EmbeddingProviderConfig, build_embedder
from .errors import (
    EmptyKeyword,
    InvalidTopicIndex,
    KExceedsClusters,
    LastTopic,
    NeedAtLeastTwo,
    ProviderUnavailable,
    SameTopic,
    TooFewDocuments,
    TooFewPoints,
    TopicTalkError,
)
from .llm import LlmProviderConfig, build_chat_provider
from .persistence import load_state, save_state
from .reduction import ReducerConfig, fit_reduce
from .topicstore import ModelConfig, TopicModelState, auto_min_cluster_size

logger = logging.getLogger(__name__)


@dataclass
class ServiceConfig:
    """Everything the service needs; see README for the config-file format.

    The remote API key is read from the environment variable named in the
    provider configs and never appears in config files.
    """

    listen_address: str = "127.0.0.1:8234"
    state_path: str = "topictalk_state.json"
    embedding: EmbeddingProviderConfig = field(default_factory=EmbeddingProviderConfig)
    llm: LlmProviderConfig | None = None
    reducer: ReducerConfig = field(default_factory=ReducerConfig)
    n_topics: int | None = None
    min_cluster_size: int | None = None
    cors_allowed_origins: list[str] = field(default_factory=list)
    allow_mutations_via_chat: bool = True
    compute_cosine_topwords: bool = True
    min_token_len: int = 3
    stopwords_path: str | None = None
    split_seed: int = 0

    def __post_init__(self):
        if self.n_topics is not None and self.n_topics < 1:
            raise ValueError("n_topics must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ServiceConfig":
        d = dict(d)
        if "embedding" in d:
            d["embedding"] = EmbeddingProviderConfig.from_dict(d["embedding"])
        if d.get("llm"):
            d["llm"] = LlmProviderConfig.from_dict(d["llm"])
        if "reducer" in d:
            d["reducer"] = ReducerConfig.from_dict(d["reducer"])
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "ServiceConfig":
        import json
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            embedding=self.embedding, reducer=self.reducer,
            llm=self.llm.to_dict() if self.llm else None,
            n_topics=self.n_topics, min_cluster_size=self.min_cluster_size,
            compute_cosine_topwords=self.compute_cosine_topwords,
            split_seed=self.split_seed)


class _NullProvider:
    """Stands in when no LLM is configured; every call degrades to fallbacks."""

    def complete(self, messages, functions=None):
        raise ProviderUnavailable("no LLM provider configured")


def make_provider(config: ServiceConfig):
    return build_chat_provider(config.llm) if config.llm else _NullProvider()


def make_namer(provider):
    """Naming callback for topicstore; None when no real provider exists."""
    if provider is None or isinstance(provider, _NullProvider):
        return None

    def namer(topwords, index):
        return llm.name_and_describe(provider, topwords, topic_index=index)
    return namer


def fit(config: ServiceConfig, texts: list[str] | None = None,
        corpus_path: str | None = None, n_topics: int | None = None,
        min_cluster_size: int | None = None, persist: bool = True) -> TopicModelState:
    """Run the full pipeline and (by default) persist the state atomically.

    ``n_topics``/``min_cluster_size`` override the config when given. When
    n_topics exceeds the discovered cluster count, the discovered count is
    kept and a warning recorded on ``state.fit_warnings``.
    """
    if texts is None:
        if corpus_path is None:
            raise ValueError("either texts or corpus_path is required")
        texts = read_corpus_file(corpus_path)
    stopwords = load_stopwords(config.stopwords_path) if config.stopwords_path else None
    corpus = ingest_corpus(texts, min_token_len=config.min_token_len,
                           stopwords=stopwords)
    warnings = list(corpus.warnings)

    embedder = build_embedder(config.embedding)
    full = np.asarray(embedder.embed_texts(corpus.texts()), dtype=np.float32)
    reduced64, reducer_model = fit_reduce(full, config.reducer)
    reduced = reduced64.astype(np.float32)

    n = len(corpus)
    mcs = min_cluster_size or config.min_cluster_size or auto_min_cluster_size(n)
    if mcs > n // 2:
        mcs = max(2, n // 2)  # keep HDBSCAN feasible on small corpora
        warnings.append(f"min_cluster_size clamped to {mcs} for a {n}-document corpus")
    assignment = resolve_noise(reduced, hdbscan_cluster(reduced, mcs))

    want = n_topics if n_topics is not None else config.n_topics
    if want is not None and want > assignment.n_clusters:
        msg = (f"requested {want} topics but only {assignment.n_clusters} clusters "
               f"were discovered; keeping {assignment.n_clusters}")
        warnings.append(msg)
        logger.warning(msg)
        want = None
    # size-ordered relabel (k == n_clusters is relabel-only)
    assignment = agglomerative_merge_to_k(reduced, assignment,
                                          want or assignment.n_clusters)

    provider = make_provider(config)
    model_cfg = config.model_config()
    state = topicstore.build_topics(
        corpus, full, reduced, assignment, config=model_cfg,
        reducer_model=reducer_model, embedder=embedder,
        namer=make_namer(provider))
    state.fit_warnings = warnings
    if persist:
        save_state(state, config.state_path)
    return state


def export_csv(state: TopicModelState) -> str:
    """doc_id, topic_index, topic_title rows for spreadsheet handoff."""
    import csv
    import io
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["doc_id", "topic_index", "topic_title"])
    labels = state.partition_labels()
    for did in range(len(state.corpus)):
        t = state.topics[int(labels[did])]
        writer.writerow([did, t.index, t.title])
    return buf.getvalue()


# --- HTTP layer ---------------------------------------------------------------


class ChatRequest(BaseModel):
    prompt: str


class FitRequest(BaseModel):
    corpus_path: str | None = None
    texts: list[str] | None = None
    n_topics: int | None = None
    min_cluster_size: int | None = None


class SplitRequest(BaseModel):
    method: str
    n_clusters: int | None = None
    min_cluster_size: int | None = None
    keyword: str | None = None
    seed: int | None = None


class MergeRequest(BaseModel):
    indices: list[int]


class KeywordRequest(BaseModel):
    keyword: str


def _topic_summary(t) -> dict:
    return {
        "index": t.index,
        "title": t.title,
        "description": t.description,
        "size": t.size,
        "topwords": [[w, s] for w, s in t.topwords_tfidf.entries[:20]],
    }


def _topic_full(t) -> dict:
    return {
        "index": t.index,
        "title": t.title,
        "description": t.description,
        "size": t.size,
        "doc_ids": sorted(t.doc_ids),
        "topwords_tfidf": t.topwords_tfidf.to_json(),
        "topwords_cosine": t.topwords_cosine.to_json() if t.topwords_cosine else None,
    }


_BAD_REQUEST = (ValueError, EmptyKeyword, LastTopic, NeedAtLeastTwo,
                TooFewDocuments, TooFewPoints, KExceedsClusters, SameTopic)


def _http_error(e: Exception) -> HTTPException:
    if isinstance(e, InvalidTopicIndex):
        return HTTPException(status_code=404, detail=str(e))
    if isinstance(e, _BAD_REQUEST):
        return HTTPException(status_code=400, detail=str(e))
    if isinstance(e, ProviderUnavailable):
        return HTTPException(status_code=503, detail=str(e))
    if isinstance(e, TopicTalkError):
        return HTTPException(status_code=400, detail=str(e))
    logger.exception("internal error")
    return HTTPException(status_code=500, detail="internal error")


class ServiceContext:
    """Shared service state: the current model, providers, locks, fit jobs."""

    def __init__(self, config: ServiceConfig, state: TopicModelState | None = None):
        self.config = config
        self.state = state
        self.provider = make_provider(config)
        self.registry = chatrouter.build_default_registry()
        self.write_lock = threading.Lock()
        self.fit_lock = threading.Lock()
        self.jobs: dict[str, dict] = {}
        if state is not None and state.namer is None:
            state.namer = make_namer(self.provider)

    def require_state(self) -> TopicModelState:
        if self.state is None:
            raise HTTPException(status_code=404, detail="no fitted model; POST /fit first")
        return self.state

    def commit(self, new_state: TopicModelState) -> None:
        save_state(new_state, self.config.state_path)
        self.state = new_state


def create_app(config: ServiceConfig, state: TopicModelState | None = None) -> FastAPI:
    if state is None and Path(config.state_path).exists():
        provider = make_provider(config)
        state = load_state(config.state_path,
                           embedder=build_embedder(config.embedding),
                           namer=make_namer(provider))
        logger.info("loaded state v%d from %s", state.version, config.state_path)
    ctx = ServiceContext(config, state)
    app = FastAPI(title="topictalk")
    app.state.ctx = ctx
    if config.cors_allowed_origins:
        app.add_middleware(
            CORSMiddleware, allow_origins=config.cors_allowed_origins,
            allow_methods=["*"], allow_headers=["*"])

    def _mutate(op):
        if not ctx.write_lock.acquire(blocking=False):
            raise HTTPException(status_code=409,
                                detail="another modification is in progress")
        try:
            old = ctx.require_state()
            try:
                new_state = op(old)
            except Exception as e:
                raise _http_error(e) from e
            ctx.commit(new_state)
            return {"version": new_state.version,
                    "topics": [_topic_summary(t) for t in new_state.topics]}
        finally:
            ctx.write_lock.release()

    @app.get("/topics")
    def list_topics():
        return [_topic_summary(t) for t in ctx.require_state().topics]

    @app.get("/topics/{index}")
    def get_topic(index: int):
        try:
            return _topic_full(ctx.require_state().topic(index))
        except InvalidTopicIndex as e:
            raise _http_error(e) from e

    @app.get("/state/version")
    def state_version():
        return {"version": ctx.require_state().version}

    @app.post("/chat")
    def chat(req: ChatRequest):
        if not req.prompt.strip():
            raise HTTPException(status_code=400, detail="prompt must be non-empty")
        with ctx.write_lock:  # chat turns over one state are serialized
            state = ctx.require_state()
            turn, new_state = chatrouter.route_prompt(
                ctx.provider, ctx.registry, state, req.prompt,
                allow_mutations=config.allow_mutations_via_chat)
            if new_state is not state:
                ctx.commit(new_state)
        return turn.to_json()

    @app.post("/fit", status_code=202)
    def start_fit(req: FitRequest):
        if req.texts is None and req.corpus_path is None:
            raise HTTPException(status_code=400,
                                detail="corpus_path or texts is required")
        if not ctx.fit_lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="a fit is already running")
        job_id = uuid.uuid4().hex
        ctx.jobs[job_id] = {"id": job_id, "status": "running", "error": None,
                            "n_topics": None, "warnings": []}

        def run():
            job = ctx.jobs[job_id]
            try:
                new_state = fit(config, texts=req.texts, corpus_path=req.corpus_path,
                                n_topics=req.n_topics,
                                min_cluster_size=req.min_cluster_size, persist=False)
                with ctx.write_lock:
                    ctx.commit(new_state)
                job["status"] = "done"
                job["n_topics"] = len(new_state.topics)
                job["warnings"] = getattr(new_state, "fit_warnings", [])
            except Exception as e:  # surfaced via job status, stage in message
                logger.exception("fit job %s failed", job_id)
                job["status"] = "error"
                job["error"] = f"{type(e).__name__}: {e}"
            finally:
                ctx.fit_lock.release()

        threading.Thread(target=run, daemon=True).start()
        return {"job_id": job_id}

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        if job_id not in ctx.jobs:
            raise HTTPException(status_code=404, detail="unknown job")
        return ctx.jobs[job_id]

    @app.post("/topics/{index}/split")
    def split_topic(index: int, req: SplitRequest):
        def op(state):
            if req.method == "kmeans":
                if req.n_clusters is None:
                    raise ValueError("kmeans split requires n_clusters")
                seed = req.seed if req.seed is not None else config.split_seed
                return topicstore.split_topic_kmeans(state, index, req.n_clusters, seed)
            if req.method == "hdbscan":
                mcs = req.min_cluster_size or max(2, state.topic(index).size // 10)
                return topicstore.split_topic_hdbscan(state, index, mcs)
            if req.method == "keyword":
                if not req.keyword:
                    raise EmptyKeyword("keyword split requires a keyword")
                return topicstore.split_topic_keyword(state, index, req.keyword)
            raise ValueError(f"unknown split method {req.method!r}")
        return _mutate(op)

    @app.post("/topics/merge")
    def merge(req: MergeRequest):
        return _mutate(lambda state: topicstore.merge_topics(state, req.indices))

    @app.delete("/topics/{index}")
    def delete(index: int):
        return _mutate(lambda state: topicstore.delete_topic(state, index))

    @app.post("/topics/from-keyword")
    def from_keyword(req: KeywordRequest):
        return _mutate(lambda state: topicstore.create_topic_keyword(state, req.keyword))

    return app
