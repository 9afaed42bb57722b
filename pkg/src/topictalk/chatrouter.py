"""Prompt routing: the LLM picks a function from the registry, the engine
executes it, and a second LLM call composes the final response.

Argument names follow each function's established trace (``topic_index`` for
knn_search, ``topic_idx`` for split_topic_kmeans). A deterministic rule-based
``fallback_route`` covers provider outages and offline runs.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field

import jsonschema

from . import llm, topicstore
from .embedding import knn_search
from .errors import ProviderUnavailable, TopicTalkError
from .llm import ChatMessage, FunctionCall

logger = logging.getLogger(__name__)

SNIPPET_CHARS = 300  # document preview length inside function results
DEFAULT_KNN_K = 5


@dataclass(frozen=True)
class FunctionSpec:
    name: str
    description: str
    parameter_schema: dict
    handler: object      # (state, args, provider) -> (result, new_state)
    mutating: bool = False

    def declaration(self) -> dict:
        return {"name": self.name, "description": self.description,
                "parameters": self.parameter_schema}


class FunctionRegistry:
    def __init__(self, specs: list[FunctionSpec]):
        names = [s.name for s in specs]
        if len(names) != len(set(names)):
            raise ValueError("duplicate function names")
        for s in specs:
            jsonschema.Draft202012Validator.check_schema(s.parameter_schema)
        self._specs = {s.name: s for s in specs}

    def __contains__(self, name: str) -> bool:
        return name in self._specs

    def get(self, name: str) -> FunctionSpec:
        return self._specs[name]

    def names(self) -> list[str]:
        return list(self._specs)

    def declarations(self) -> list[dict]:
        return [s.declaration() for s in self._specs.values()]

    def validate_arguments(self, call: FunctionCall) -> str | None:
        """None when the call validates, else a human-readable error."""
        if call.name not in self._specs:
            return f"unknown function {call.name!r}"
        schema = self._specs[call.name].parameter_schema
        try:
            jsonschema.validate(call.arguments, schema)
        except jsonschema.ValidationError as e:
            return e.message
        return None


def _obj(properties: dict, required: list[str]) -> dict:
    return {"type": "object", "properties": properties, "required": required,
            "additionalProperties": False}

_INT = {"type": "integer", "minimum": 0}


def _snippet(text: str) -> str:
    return text[:SNIPPET_CHARS]


def _topic_summary(topic) -> dict:
    return {"index": topic.index, "title": topic.title, "size": topic.size}


def _handle_knn_search(state, args, provider):
    topic = state.topic(args["topic_index"])
    k = args.get("k", DEFAULT_KNN_K)
    query = state._require_embedder().embed_text(args["query"])
    hits = knn_search(state.full_matrix, topic.doc_ids, query, k)
    docs = [{"doc_id": did, "similarity": round(sim, 6),
             "text": _snippet(state.corpus.documents[did].text)}
            for did, sim in hits]
    return {"topic_index": topic.index, "query": args["query"], "documents": docs}, state


def _handle_list_topics(state, args, provider):
    return {"topics": [_topic_summary(t) for t in state.topics]}, state


def _handle_identify_topic(state, args, provider):
    index = llm.identify_topic(provider, state, args["query"])
    return {"topic_index": index, "title": state.topics[index].title}, state


def _handle_compare_topics(state, args, provider):
    text = llm.compare_topics(provider, state, args["index_a"], args["index_b"])
    return {"comparison": text}, state


def _mutation_result(old_state, new_state) -> dict:
    record = new_state.history[-1]
    return {
        "noop": record.noop,
        "topics_before": len(old_state.topics),
        "topics_after": len(new_state.topics),
        "affected_topics": [_topic_summary(new_state.topics[i])
                            for i in record.affected_after],
        "version": new_state.version,
    }


def _handle_split_kmeans(state, args, provider):
    new = topicstore.split_topic_kmeans(state, args["topic_idx"], args["n_clusters"],
                                        seed=state.config.split_seed)
    return _mutation_result(state, new), new


def _handle_split_hdbscan(state, args, provider):
    mcs = args.get("min_cluster_size") or max(
        2, state.topic(args["topic_index"]).size // 10)
    new = topicstore.split_topic_hdbscan(state, args["topic_index"], mcs)
    return _mutation_result(state, new), new


def _handle_split_keyword(state, args, provider):
    new = topicstore.split_topic_keyword(state, args["topic_index"], args["keyword"])
    return _mutation_result(state, new), new


def _handle_create_keyword(state, args, provider):
    new = topicstore.create_topic_keyword(state, args["keyword"])
    return _mutation_result(state, new), new


def _handle_merge_topics(state, args, provider):
    new = topicstore.merge_topics(state, args["indices"])
    return _mutation_result(state, new), new


def _handle_delete_topic(state, args, provider):
    new = topicstore.delete_topic(state, args["index"])
    return _mutation_result(state, new), new


def build_default_registry() -> FunctionRegistry:
    return FunctionRegistry([
        FunctionSpec(
            "knn_search",
            "Find the documents of a topic most relevant to a query string.",
            _obj({"topic_index": _INT, "query": {"type": "string"},
                  "k": {"type": "integer", "minimum": 1}},
                 ["topic_index", "query"]),
            _handle_knn_search),
        FunctionSpec(
            "list_topics",
            "List all topics with index, title and size.",
            _obj({}, []),
            _handle_list_topics),
        FunctionSpec(
            "identify_topic",
            "Find the topic most relevant to a query when its index is unknown.",
            _obj({"query": {"type": "string"}}, ["query"]),
            _handle_identify_topic),
        FunctionSpec(
            "compare_topics",
            "Compare two topics based on their titles and descriptions.",
            _obj({"index_a": _INT, "index_b": _INT}, ["index_a", "index_b"]),
            _handle_compare_topics),
        FunctionSpec(
            "split_topic_kmeans",
            "Split one topic into n_clusters sub-topics with k-means.",
            _obj({"topic_idx": _INT, "n_clusters": {"type": "integer", "minimum": 2}},
                 ["topic_idx", "n_clusters"]),
            _handle_split_kmeans, mutating=True),
        FunctionSpec(
            "split_topic_hdbscan",
            "Split one topic into density-based sub-topics with HDBSCAN.",
            _obj({"topic_index": _INT,
                  "min_cluster_size": {"type": "integer", "minimum": 2}},
                 ["topic_index"]),
            _handle_split_hdbscan, mutating=True),
        FunctionSpec(
            "split_topic_keyword",
            "Move a topic's documents closer to a keyword than to the topic "
            "centroid into a new topic.",
            _obj({"topic_index": _INT, "keyword": {"type": "string", "minLength": 1}},
                 ["topic_index", "keyword"]),
            _handle_split_keyword, mutating=True),
        FunctionSpec(
            "create_topic_keyword",
            "Create a new topic globally from all documents closer to a keyword "
            "than to their own topic's centroid.",
            _obj({"keyword": {"type": "string", "minLength": 1}}, ["keyword"]),
            _handle_create_keyword, mutating=True),
        FunctionSpec(
            "merge_topics",
            "Merge several topics into one super-topic.",
            _obj({"indices": {"type": "array", "items": _INT, "minItems": 2}},
                 ["indices"]),
            _handle_merge_topics, mutating=True),
        FunctionSpec(
            "delete_topic",
            "Delete a topic, reassigning its documents to the closest other topic.",
            _obj({"index": _INT}, ["index"]),
            _handle_delete_topic, mutating=True),
    ])


@dataclass(frozen=True)
class ChatTurn:
    user_prompt: str
    chosen_call: FunctionCall | None
    function_result: dict | None
    final_response: str
    state_version_before: int
    state_version_after: int

    def to_json(self) -> dict:
        return {
            "prompt": self.user_prompt,
            "function_call": self.chosen_call.to_json() if self.chosen_call else None,
            "result_summary": self.function_result,
            "response": self.final_response,
            "version_before": self.state_version_before,
            "version_after": self.state_version_after,
        }


_SPLIT_RE = re.compile(r"split\s+(?:the\s+)?topic\s+(\d+)\s+into\s+(\d+)", re.IGNORECASE)
_MERGE_RE = re.compile(r"merge\s+topics?\s+((?:\d+[\s,]*(?:and\s+)?)+)", re.IGNORECASE)
_DELETE_RE = re.compile(r"delete\s+(?:the\s+)?topic\s+(\d+)", re.IGNORECASE)
_COMPARE_RE = re.compile(
    r"compare\s+topics?\s+(\d+)\s+(?:and|with|to|vs\.?)\s+(?:topic\s+)?(\d+)", re.IGNORECASE)
_TOPIC_REF_RE = re.compile(r"topic\s+(\d+)", re.IGNORECASE)


def fallback_route(prompt: str) -> FunctionCall | None:
    """Deterministic rule-based intent matching; total over all inputs."""
    m = _SPLIT_RE.search(prompt)
    if m:
        return FunctionCall("split_topic_kmeans",
                            {"topic_idx": int(m.group(1)), "n_clusters": int(m.group(2))})
    m = _MERGE_RE.search(prompt)
    if m:
        indices = [int(x) for x in re.findall(r"\d+", m.group(1))]
        if len(indices) >= 2:
            return FunctionCall("merge_topics", {"indices": indices})
    m = _DELETE_RE.search(prompt)
    if m:
        return FunctionCall("delete_topic", {"index": int(m.group(1))})
    m = _COMPARE_RE.search(prompt)
    if m:
        return FunctionCall("compare_topics",
                            {"index_a": int(m.group(1)), "index_b": int(m.group(2))})
    if "?" in prompt:
        m = _TOPIC_REF_RE.search(prompt)
        if m:
            return FunctionCall("knn_search", {"topic_index": int(m.group(1)),
                                               "query": prompt, "k": DEFAULT_KNN_K})
    return None


def _compose_response(provider, prompt: str, call: FunctionCall, result: dict) -> str:
    rendered = json.dumps(result, sort_keys=True, ensure_ascii=False)
    compose = llm.load_template("compose").format(prompt=prompt, function=call.name,
                                                  result=rendered)
    try:
        reply = provider.complete([ChatMessage(role="user", content=compose)])
        if reply.content:
            return reply.content
    except ProviderUnavailable:
        pass
    return f"Executed {call.name}. Result: {rendered}"


def route_prompt(provider, registry: FunctionRegistry, state, prompt: str,
                 allow_mutations: bool = True):
    """One chat turn; returns (ChatTurn, possibly-new state).

    Every failure path produces an explanatory final_response instead of an
    exception. Invalid arguments get exactly one repair round-trip.
    """
    if not prompt or not prompt.strip():
        raise ValueError("prompt must be non-empty")
    version_before = state.version
    system = ChatMessage(role="system", content=llm.load_template("route_system"))
    user = ChatMessage(role="user", content=prompt)

    call: FunctionCall | None = None
    direct_answer: str | None = None
    try:
        reply = provider.complete([system, user], functions=registry.declarations())
        if reply.function_call is not None:
            call = reply.function_call
            error = registry.validate_arguments(call)
            if error is not None:
                repair = ChatMessage(
                    role="user",
                    content=(f"The arguments for {call.name} failed validation: "
                             f"{error}. Reply with a corrected function call."))
                reply2 = provider.complete([system, user,
                                            ChatMessage(role="assistant",
                                                        function_call=call),
                                            repair],
                                           functions=registry.declarations())
                call = reply2.function_call
                if call is None or registry.validate_arguments(call) is not None:
                    call = None
                    direct_answer = ("I could not determine valid arguments for that "
                                     "request; please rephrase it.")
        else:
            direct_answer = reply.content
    except ProviderUnavailable as e:
        logger.warning("routing provider unavailable, using fallback rules: %s", e)
        call = fallback_route(prompt)
        if call is not None and registry.validate_arguments(call) is not None:
            call = None
        if call is None:
            direct_answer = ("The language model is unavailable and the request "
                             "did not match any built-in command.")

    if call is None:
        return ChatTurn(prompt, None, None, direct_answer or "",
                        version_before, state.version), state

    spec = registry.get(call.name)
    if spec.mutating and not allow_mutations:
        turn = ChatTurn(prompt, call, None,
                        "Topic modifications are disabled on this deployment.",
                        version_before, state.version)
        return turn, state

    try:
        result, new_state = spec.handler(state, call.arguments, provider)
    except TopicTalkError as e:
        turn = ChatTurn(prompt, call, {"error": str(e)},
                        f"Could not execute {call.name}: {e}",
                        version_before, state.version)
        return turn, state
    except Exception:
        logger.exception("handler %s crashed", call.name)
        turn = ChatTurn(prompt, call, {"error": "internal error"},
                        f"An internal error occurred while executing {call.name}.",
                        version_before, state.version)
        return turn, state

    final = _compose_response(provider, prompt, call, result)
    turn = ChatTurn(prompt, call, result, final, version_before, new_state.version)
    return turn, new_state
