"""LLM-backed behavior: topic naming, RAG answering, topic identification
and comparison, plus the provider abstraction.

Two providers: an OpenAI-compatible remote chat endpoint and a scriptable
mock for offline runs. Every failure path degrades to a deterministic
fallback (placeholder titles, centroid-based identification) so the engine
never hard-fails on provider flakiness. Prompt templates are versioned data
files under ``prompts/``.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

from .embedding import cosine_similarity
from .errors import (
    AmbiguousResponse,
    MalformedResponse,
    ProviderUnavailable,
    SameTopic,
)
from .topwords import NAMING_WORD_COUNT, TopwordList

logger = logging.getLogger(__name__)

TEMPLATE_VERSION = "v1"
RETRY_ATTEMPTS = 3
RETRY_BACKOFF_S = 1.0
CONTEXT_CHARS_PER_DOC = 1500  # guards the answer prompt against context blowup
MAX_TITLE_WORDS = 8
MAX_QUERY_KEYWORDS = 5

_request_ids = itertools.count(1)
_PROMPT_DIR = Path(__file__).parent / "prompts"
_TEMPLATE_CACHE: dict[str, str] = {}


def load_template(name: str) -> str:
    key = f"{name}.{TEMPLATE_VERSION}"
    if key not in _TEMPLATE_CACHE:
        _TEMPLATE_CACHE[key] = (_PROMPT_DIR / f"{key}.txt").read_text(encoding="utf-8")
    return _TEMPLATE_CACHE[key]


@dataclass(frozen=True)
class LlmProviderConfig:
    kind: str = "mock"                      # "remote_chat" | "mock"
    endpoint_url: str | None = None
    model_name: str = "mock"
    api_key_env_var: str | None = None
    temperature: float = 0.0
    max_output_tokens: int = 1024
    request_timeout: float = 30.0
    script: tuple = ()                      # mock only: ({"match": ..., ...}, ...)
    script_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("remote_chat", "mock"):
            raise ValueError(f"unknown provider kind {self.kind!r}")
        if not np.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError("temperature must be finite and >= 0")
        if self.kind == "remote_chat" and not (self.endpoint_url and self.api_key_env_var):
            raise ValueError("remote_chat requires endpoint_url and api_key_env_var")
        if self.kind == "mock" and not self.script and not self.script_path:
            raise ValueError("mock provider requires a script table")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "endpoint_url": self.endpoint_url,
            "model_name": self.model_name,
            "api_key_env_var": self.api_key_env_var,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "request_timeout": self.request_timeout,
            "script": list(self.script),
            "script_path": self.script_path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LlmProviderConfig":
        d = dict(d)
        d["script"] = tuple(d.get("script") or ())
        return cls(**d)


@dataclass(frozen=True)
class FunctionCall:
    name: str
    arguments: dict

    def to_json(self) -> dict:
        return {"name": self.name, "arguments": self.arguments}


@dataclass(frozen=True)
class ChatMessage:
    role: str                                # system | user | assistant | function_result
    content: str = ""
    function_call: FunctionCall | None = None
    name: str | None = None                  # producing call's name on function_result

    def __post_init__(self):
        if self.role == "function_result" and not self.name:
            raise ValueError("function_result messages must carry the call name")


class MockChatProvider:
    """Replays a script table: the first entry whose ``match`` substring
    occurs in the last user message wins; ``"*"`` matches anything.

    Entries are ``{"match": str, "response": str}`` or
    ``{"match": str, "function_call": {"name": str, "arguments": dict}}``.
    Requests are recorded for assertions; safe under concurrent reads.
    """

    def __init__(self, script):
        self.script = [dict(entry) for entry in script]
        self.requests: list[dict] = []
        self._lock = threading.Lock()

    @classmethod
    def from_path(cls, path: str | Path) -> "MockChatProvider":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def complete(self, messages: list[ChatMessage],
                 functions: list[dict] | None = None) -> ChatMessage:
        prompt = next((m.content for m in reversed(messages) if m.role == "user"), "")
        with self._lock:
            self.requests.append({"messages": [m.content for m in messages],
                                  "functions": [f["name"] for f in functions or []]})
        for entry in self.script:
            if entry["match"] == "*" or entry["match"] in prompt:
                if "function_call" in entry:
                    fc = entry["function_call"]
                    return ChatMessage(role="assistant",
                                       function_call=FunctionCall(fc["name"],
                                                                  dict(fc["arguments"])))
                return ChatMessage(role="assistant", content=entry["response"])
        raise ProviderUnavailable("mock script has no entry matching the prompt")


class RemoteChatProvider:
    """OpenAI-compatible chat completions with function declarations.

    Wire shape: ``{"model", "messages", "temperature", "max_tokens",
    "tools": [{"type": "function", "function": {...}}]}``; a function choice
    comes back as ``choices[0].message.tool_calls``.
    """

    def __init__(self, cfg: LlmProviderConfig, transport: httpx.BaseTransport | None = None):
        self.cfg = cfg
        self._client = httpx.Client(timeout=cfg.request_timeout, transport=transport)
        self._sleep = time.sleep

    def _wire_messages(self, messages: list[ChatMessage]) -> list[dict]:
        wire = []
        for m in messages:
            if m.role == "function_result":
                wire.append({"role": "tool", "name": m.name, "content": m.content})
            elif m.function_call is not None:
                wire.append({"role": m.role, "content": m.content or None,
                             "tool_calls": [{"type": "function", "function": {
                                 "name": m.function_call.name,
                                 "arguments": json.dumps(m.function_call.arguments)}}]})
            else:
                wire.append({"role": m.role, "content": m.content})
        return wire

    def complete(self, messages: list[ChatMessage],
                 functions: list[dict] | None = None) -> ChatMessage:
        payload: dict = {
            "model": self.cfg.model_name,
            "messages": self._wire_messages(messages),
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_output_tokens,
        }
        if functions:
            payload["tools"] = [{"type": "function", "function": f} for f in functions]
        headers = {
            "Authorization": f"Bearer {os.environ.get(self.cfg.api_key_env_var or '', '')}",
            "Content-Type": "application/json",
        }
        req_id = next(_request_ids)
        logger.info("llm request %d: %d messages, %d functions",
                    req_id, len(messages), len(functions or []))
        last_err: Exception | None = None
        for attempt in range(RETRY_ATTEMPTS):
            if attempt > 0:
                self._sleep(RETRY_BACKOFF_S * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.cfg.endpoint_url, json=payload, headers=headers)
                resp.raise_for_status()
                message = resp.json()["choices"][0]["message"]
            except (httpx.HTTPError, KeyError, IndexError, TypeError,
                    json.JSONDecodeError) as e:
                last_err = e
                logger.warning("llm request %d failed (attempt %d/%d): %s",
                               req_id, attempt + 1, RETRY_ATTEMPTS, e)
                continue
            logger.info("llm response %d: %s", req_id,
                        "tool call" if message.get("tool_calls") else "text")
            calls = message.get("tool_calls") or []
            if calls:
                fn = calls[0]["function"]
                try:
                    args = json.loads(fn["arguments"]) if isinstance(
                        fn["arguments"], str) else dict(fn["arguments"])
                except (json.JSONDecodeError, TypeError) as e:
                    raise MalformedResponse(f"unparseable tool arguments: {e}") from e
                return ChatMessage(role="assistant",
                                   function_call=FunctionCall(fn["name"], args))
            return ChatMessage(role="assistant", content=message.get("content") or "")
        raise ProviderUnavailable(
            f"chat provider failed after {RETRY_ATTEMPTS} attempts: {last_err}")


def build_chat_provider(cfg: LlmProviderConfig,
                        transport: httpx.BaseTransport | None = None):
    if cfg.kind == "mock":
        if cfg.script:
            return MockChatProvider(cfg.script)
        return MockChatProvider.from_path(cfg.script_path)
    return RemoteChatProvider(cfg, transport=transport)


# --- operations --------------------------------------------------------------


def _ask(provider, prompt: str) -> str:
    reply = provider.complete([ChatMessage(role="user", content=prompt)])
    return reply.content


_TITLE_RE = re.compile(r"^\s*title\s*:\s*(.+)$", re.IGNORECASE | re.MULTILINE)
_DESC_RE = re.compile(r"^\s*description\s*:\s*(.+)$",
                      re.IGNORECASE | re.MULTILINE | re.DOTALL)


def _clip_title(raw: str) -> str:
    head = re.split(r"[.,\n]", raw.strip(), maxsplit=1)[0]
    return " ".join(head.split()[:MAX_TITLE_WORDS]).strip()


def _clip_description(raw: str) -> str:
    sentences = re.split(r"(?<=[.!?])\s+", raw.strip())
    return " ".join(sentences[:3]).strip()


def _parse_naming(text: str) -> tuple[str, str]:
    title_m = _TITLE_RE.search(text)
    if not title_m:
        raise MalformedResponse(f"no title line in {text[:200]!r}")
    desc_m = _DESC_RE.search(text)
    title = _clip_title(title_m.group(1))
    description = _clip_description(desc_m.group(1)) if desc_m else ""
    if not title:
        raise MalformedResponse("empty title")
    return title, description


def name_and_describe(provider, topwords: TopwordList,
                      max_words: int = NAMING_WORD_COUNT,
                      topic_index: int | None = None) -> tuple[str, str]:
    """Title and description from the topic's top-words.

    Sends the top-min(max_words, available) words; an unparseable response is
    retried once, after which (or on provider failure) the placeholder
    "Topic i" is returned and the raw response logged.
    """
    if not topwords.entries:
        raise ValueError("topwords must be non-empty")
    words = topwords.words()[:max_words]
    prompt = load_template("naming").format(words=", ".join(words))
    placeholder = (f"Topic {topic_index}" if topic_index is not None else "Untitled topic", "")
    for attempt in range(2):
        try:
            text = _ask(provider, prompt)
        except ProviderUnavailable as e:
            logger.error("naming failed: %s", e)
            return placeholder
        try:
            return _parse_naming(text)
        except MalformedResponse as e:
            logger.warning("naming response unparseable (attempt %d): %s", attempt + 1, e)
    return placeholder


def extract_query_keywords(provider, question: str) -> list[str]:
    """At most MAX_QUERY_KEYWORDS salient keywords; falls back to the whole
    question as a single keyword whenever extraction fails or yields nothing."""
    if not question:
        raise ValueError("question must be non-empty")
    prompt = load_template("keywords").format(question=question)
    try:
        text = _ask(provider, prompt)
    except ProviderUnavailable:
        return [question]
    keywords: list[str] = []
    try:
        parsed = json.loads(text)
        if isinstance(parsed, list):
            keywords = [str(k).strip() for k in parsed if str(k).strip()]
    except json.JSONDecodeError:
        parts = re.split(r"[,\n]", text)
        keywords = [p.strip(" \t\"'-*") for p in parts if p.strip(" \t\"'-*")]
    keywords = keywords[:MAX_QUERY_KEYWORDS]
    return keywords if keywords else [question]


@dataclass(frozen=True)
class Answer:
    text: str
    cited_doc_ids: tuple[int, ...]
    similarities: tuple[float, ...] = field(default=())


def retrieve_for_question(state, topic_index: int, question: str,
                          k: int = 5, provider=None) -> list[tuple[int, float]]:
    """Embed the question's keywords, average them, and run k-NN over the
    topic's documents in full embedding space."""
    from .embedding import knn_search  # local import keeps module load light

    topic = state.topic(topic_index)
    keywords = (extract_query_keywords(provider, question)
                if provider is not None else [question])
    vectors = state._require_embedder().embed_texts(keywords)
    query = np.mean(np.asarray(vectors, dtype=np.float64), axis=0)
    return knn_search(state.full_matrix, topic.doc_ids, query, k)


def answer_question(provider, state, topic_index: int, question: str,
                    k: int = 5) -> Answer:
    """Retrieve the top-k topic documents for the question and have the LLM
    answer from them; the cited ids always come back so the caller can
    verify the grounding."""
    if not question:
        raise ValueError("question must be non-empty")
    hits = retrieve_for_question(state, topic_index, question, k, provider=provider)
    docs = "\n\n".join(
        f"Document index {did}:\n{state.corpus.documents[did].text[:CONTEXT_CHARS_PER_DOC]}"
        for did, _ in hits)
    prompt = load_template("answer").format(question=question, documents=docs)
    cited = tuple(did for did, _ in hits)
    sims = tuple(sim for _, sim in hits)
    try:
        text = _ask(provider, prompt)
    except ProviderUnavailable:
        text = ("The language model is currently unavailable; the most relevant "
                f"documents for your question are {list(cited)}.")
    return Answer(text=text, cited_doc_ids=cited, similarities=sims)


def identify_topic(provider, state, query: str) -> int:
    """Pick the topic most relevant to a query; the LLM chooses from the
    numbered titles and descriptions, with a centroid-similarity fallback."""
    if not query:
        raise ValueError("query must be non-empty")
    if len(state.topics) == 1:
        return 0
    listing = "\n".join(f"{t.index}: {t.title} — {t.description}" for t in state.topics)
    prompt = load_template("identify").format(query=query, topics=listing)
    try:
        text = _ask(provider, prompt)
        m = re.search(r"-?\d+", text)
        if not m:
            raise AmbiguousResponse(f"no index in {text[:100]!r}")
        index = int(m.group())
        if not (0 <= index < len(state.topics)):
            raise AmbiguousResponse(f"index {index} out of range")
        return index
    except (ProviderUnavailable, AmbiguousResponse) as e:
        logger.warning("identify_topic falling back to centroid similarity: %s", e)
        qvec = state._require_embedder().embed_text(query)
        sims = [cosine_similarity(qvec, t.centroid_full) for t in state.topics]
        return int(np.argmax(sims))


def compare_topics(provider, state, index_a: int, index_b: int) -> str:
    """LLM comparison of two topics from titles, descriptions and top words."""
    a = state.topic(index_a)
    b = state.topic(index_b)
    if index_a == index_b:
        raise SameTopic(f"cannot compare topic {index_a} with itself")
    prompt = load_template("compare").format(
        index_a=a.index, title_a=a.title, description_a=a.description,
        words_a=", ".join(a.topwords_tfidf.words()[:20]),
        index_b=b.index, title_b=b.title, description_b=b.description,
        words_b=", ".join(b.topwords_tfidf.words()[:20]))
    return _ask(provider, prompt)
