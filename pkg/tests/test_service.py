from __future__ import annotations

import json
import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

import topictalk.persistence as persistence
from topictalk.embedding import EmbeddingProviderConfig
from topictalk.errors import CorruptState, SchemaVersionMismatch
from topictalk.llm import LlmProviderConfig
from topictalk.persistence import load_state, save_state
from topictalk.reduction import ReducerConfig
from topictalk.service import ServiceConfig, create_app, export_csv, fit
from topictalk.topicstore import merge_topics

from conftest import make_state
from oracles import adjusted_rand_index, token_group_corpus


def _config(tmp_path, **kw) -> ServiceConfig:
    kw.setdefault("state_path", str(tmp_path / "state.json"))
    return ServiceConfig(**kw)


PAPER_SCRIPT = (
    {"match": "moon landing",
     "function_call": {"name": "knn_search",
                       "arguments": {"topic_index": 1, "query": "moon landing",
                                     "k": 5}}},
    {"match": "subtopics",
     "function_call": {"name": "split_topic_kmeans",
                       "arguments": {"topic_idx": 2, "n_clusters": 5}}},
)


class TestFitPipeline:
    def test_n_topics_omitted_keeps_discovered_count(self, tmp_path):
        texts, _ = token_group_corpus(3, 60, seed=2)
        state = fit(_config(tmp_path), texts=texts)
        assert len(state.topics) == 3

    def test_n_topics_above_discovered_keeps_discovered_with_warning(self, tmp_path):
        texts, _ = token_group_corpus(3, 60, seed=2)
        state = fit(_config(tmp_path), texts=texts, n_topics=50)
        assert len(state.topics) == 3
        assert any("50" in w for w in state.fit_warnings)

    def test_small_corpus_warning_propagates(self, tmp_path):
        texts, _ = token_group_corpus(2, 30, seed=3)
        state = fit(_config(tmp_path), texts=texts)
        assert any("10,000" in w for w in state.fit_warnings)

    def test_merge_to_requested_count(self, tmp_path):
        texts, labels = token_group_corpus(4, 50, seed=4)
        state = fit(_config(tmp_path), texts=texts, n_topics=2)
        assert len(state.topics) == 2

    def test_export_csv(self, tmp_path):
        texts, _ = token_group_corpus(2, 25, seed=5)
        state = fit(_config(tmp_path), texts=texts)
        lines = export_csv(state).strip().splitlines()
        assert lines[0] == "doc_id,topic_index,topic_title"
        assert len(lines) == len(texts) + 1


class TestPersistence:
    def test_round_trip_byte_identical(self, tmp_path):
        state = make_state()
        p1 = tmp_path / "a.json"
        p2 = tmp_path / "b.json"
        save_state(state, p1)
        save_state(load_state(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_version_and_history_preserved(self, tmp_path):
        state = merge_topics(make_state(), {0, 1})
        path = tmp_path / "s.json"
        save_state(state, path)
        loaded = load_state(path)
        assert loaded.version == 1
        assert loaded.history[-1].kind == "merge"
        assert [t.doc_ids for t in loaded.topics] == [t.doc_ids for t in state.topics]

    def test_truncated_embedding_file(self, tmp_path):
        state = make_state()
        path = tmp_path / "s.json"
        save_state(state, path)
        emb_name = json.loads(path.read_text())["embeddings"]["full"]
        emb_path = tmp_path / emb_name
        emb_path.write_bytes(emb_path.read_bytes()[:100])
        with pytest.raises(CorruptState) as exc:
            load_state(path)
        assert exc.value.byte_offset is not None

    def test_corrupt_json_reports_offset(self, tmp_path):
        state = make_state()
        path = tmp_path / "s.json"
        save_state(state, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CorruptState):
            load_state(path)

    def test_schema_version_mismatch_names_both(self, tmp_path):
        state = make_state()
        path = tmp_path / "s.json"
        save_state(state, path)
        doc = json.loads(path.read_text())
        doc["schema_version"] = 2
        path.write_text(json.dumps(doc))
        with pytest.raises(SchemaVersionMismatch) as exc:
            load_state(path)
        assert exc.value.found == 2
        assert exc.value.expected == 1

    def test_fault_injected_crashes_never_corrupt_state(self, tmp_path, monkeypatch):
        state = make_state()
        path = tmp_path / "s.json"
        save_state(state, path)  # committed v0
        modified = merge_topics(state, {0, 1})

        class Crash(RuntimeError):
            pass

        real_write, real_replace = persistence._write_bytes, persistence._replace
        for crash_at in range(1, 21):
            counter = {"n": 0}

            def hook(fn):
                def wrapped(*args):
                    counter["n"] += 1
                    if counter["n"] == crash_at:
                        raise Crash(f"injected at io op {crash_at}")
                    return fn(*args)
                return wrapped

            monkeypatch.setattr(persistence, "_write_bytes", hook(real_write))
            monkeypatch.setattr(persistence, "_replace", hook(real_replace))
            try:
                save_state(modified, path)
            except Crash:
                pass
            monkeypatch.setattr(persistence, "_write_bytes", real_write)
            monkeypatch.setattr(persistence, "_replace", real_replace)

            loaded = load_state(path)  # must always load something consistent
            assert loaded.version in (0, 1)
            expected = state if loaded.version == 0 else modified
            assert [t.doc_ids for t in loaded.topics] == \
                [t.doc_ids for t in expected.topics]
            save_state(state, path)  # reset to v0 for the next crash point


def _client(tmp_path, state=None, **kw) -> TestClient:
    config = _config(tmp_path, **kw)
    app = create_app(config, state=state)
    return TestClient(app)


class TestHttpEndpoints:
    def test_topics_listing_shape(self, tmp_path):
        client = _client(tmp_path, state=make_state())
        resp = client.get("/topics")
        assert resp.status_code == 200
        topics = resp.json()
        assert len(topics) == 3
        assert set(topics[0]) == {"index", "title", "description", "size", "topwords"}
        assert len(topics[0]["topwords"]) <= 20

    def test_topic_detail_includes_both_lists(self, tmp_path):
        state = make_state(compute_cosine=True)
        client = _client(tmp_path, state=state)
        resp = client.get("/topics/1")
        assert resp.status_code == 200
        body = resp.json()
        assert body["topwords_tfidf"]["method"] == "tfidf"
        assert body["topwords_cosine"]["method"] == "cosine"
        assert body["doc_ids"] == sorted(state.topics[1].doc_ids)

    def test_unknown_topic_404(self, tmp_path):
        client = _client(tmp_path, state=make_state())
        assert client.get("/topics/99").status_code == 404

    def test_no_state_404(self, tmp_path):
        client = _client(tmp_path)
        assert client.get("/topics").status_code == 404

    def test_state_version(self, tmp_path):
        client = _client(tmp_path, state=make_state())
        assert client.get("/state/version").json() == {"version": 0}

    def test_split_endpoint_updates_topics(self, tmp_path):
        client = _client(tmp_path, state=make_state(docs_per_group=30))
        resp = client.post("/topics/1/split",
                           json={"method": "kmeans", "n_clusters": 2})
        assert resp.status_code == 200
        body = resp.json()
        assert body["version"] == 1
        assert len(body["topics"]) == 4

    def test_merge_endpoint(self, tmp_path):
        client = _client(tmp_path, state=make_state())
        resp = client.post("/topics/merge", json={"indices": [0, 2]})
        assert resp.status_code == 200
        assert len(resp.json()["topics"]) == 2
        assert resp.json()["version"] == 1

    def test_delete_endpoint(self, tmp_path):
        client = _client(tmp_path, state=make_state())
        resp = client.delete("/topics/1")
        assert resp.status_code == 200
        assert len(resp.json()["topics"]) == 2

    def test_delete_last_topic_400(self, tmp_path):
        client = _client(tmp_path, state=make_state(n_groups=1))
        resp = client.delete("/topics/0")
        assert resp.status_code == 400
        assert "only topic" in resp.json()["detail"]

    def test_keyword_topic_endpoint(self, tmp_path):
        state = make_state()
        client = _client(tmp_path, state=state)
        keyword = state.corpus.documents[0].text
        resp = client.post("/topics/from-keyword", json={"keyword": keyword})
        assert resp.status_code == 200
        assert resp.json()["version"] == 1

    def test_invalid_split_method_400(self, tmp_path):
        client = _client(tmp_path, state=make_state())
        resp = client.post("/topics/0/split", json={"method": "sorcery"})
        assert resp.status_code == 400

    def test_mutation_conflict_409(self, tmp_path):
        client = _client(tmp_path, state=make_state())
        ctx = client.app.state.ctx
        assert ctx.write_lock.acquire(blocking=False)
        try:
            resp = client.delete("/topics/1")
            assert resp.status_code == 409
        finally:
            ctx.write_lock.release()
        assert client.delete("/topics/1").status_code == 200

    def test_concurrent_mutations_exactly_one_wins_per_round(self, tmp_path):
        client = _client(tmp_path, state=make_state(n_groups=4))
        results = []

        def attempt():
            results.append(client.post("/topics/merge", json={"indices": [0, 1]}))

        threads = [threading.Thread(target=attempt) for _ in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        codes = sorted(r.status_code for r in results)
        assert codes in ([200, 200], [200, 409])
        successes = codes.count(200)
        version = client.get("/state/version").json()["version"]
        assert version == successes

    def test_mutation_persists_state(self, tmp_path):
        config_path = tmp_path / "state.json"
        client = _client(tmp_path, state=make_state())
        client.post("/topics/merge", json={"indices": [0, 1]})
        assert load_state(config_path).version == 1


class TestChatEndpoint:
    def test_moon_landing_routes_to_knn_search(self, tmp_path):
        state = make_state()
        client = _client(tmp_path, state=state,
                         llm=LlmProviderConfig(kind="mock", script=PAPER_SCRIPT))
        resp = client.post("/chat", json={
            "prompt": "Which information related to the keyword 'moon landing' "
                      "does topic 1 have?"})
        assert resp.status_code == 200
        body = resp.json()
        assert body["function_call"]["name"] == "knn_search"
        assert body["function_call"]["arguments"] == {
            "topic_index": 1, "query": "moon landing", "k": 5}
        assert body["version_after"] == body["version_before"]

    def test_subtopics_prompt_splits_and_bumps_version(self, tmp_path):
        state = make_state(docs_per_group=30)
        client = _client(tmp_path, state=state,
                         llm=LlmProviderConfig(kind="mock", script=PAPER_SCRIPT))
        resp = client.post("/chat",
                           json={"prompt": "What are 5 potential subtopics of topic 2"})
        body = resp.json()
        assert body["function_call"]["name"] == "split_topic_kmeans"
        assert body["version_after"] == body["version_before"] + 1
        assert len(client.get("/topics").json()) == 3 - 1 + 5

    def test_empty_prompt_400(self, tmp_path):
        client = _client(tmp_path, state=make_state())
        assert client.post("/chat", json={"prompt": "  "}).status_code == 400

    def test_mutations_disabled_via_config(self, tmp_path):
        state = make_state()
        client = _client(tmp_path, state=state, allow_mutations_via_chat=False,
                         llm=LlmProviderConfig(kind="mock", script=PAPER_SCRIPT))
        resp = client.post("/chat",
                           json={"prompt": "What are 5 potential subtopics of topic 2"})
        assert "disabled" in resp.json()["response"]
        assert client.get("/state/version").json()["version"] == 0


class TestFitEndpoint:
    def test_async_fit_job(self, tmp_path):
        texts, _ = token_group_corpus(3, 40, seed=6)
        client = _client(tmp_path)
        resp = client.post("/fit", json={"texts": texts, "n_topics": 3})
        assert resp.status_code == 202
        job_id = resp.json()["job_id"]
        for _ in range(200):
            job = client.get(f"/jobs/{job_id}").json()
            if job["status"] != "running":
                break
            time.sleep(0.05)
        assert job["status"] == "done"
        assert job["n_topics"] == 3
        assert len(client.get("/topics").json()) == 3

    def test_unknown_job_404(self, tmp_path):
        client = _client(tmp_path)
        assert client.get("/jobs/doesnotexist").status_code == 404

    def test_fit_requires_corpus(self, tmp_path):
        client = _client(tmp_path)
        assert client.post("/fit", json={}).status_code == 400

    def test_fit_error_reported_in_job(self, tmp_path):
        client = _client(tmp_path)
        resp = client.post("/fit", json={"corpus_path": "/nonexistent/corpus.txt"})
        job_id = resp.json()["job_id"]
        for _ in range(100):
            job = client.get(f"/jobs/{job_id}").json()
            if job["status"] != "running":
                break
            time.sleep(0.05)
        assert job["status"] == "error"
        assert "FileNotFoundError" in job["error"]


class TestTwentyTopicListing:
    def test_twenty_topics_with_mock_titles(self, tmp_path):
        texts, labels = token_group_corpus(20, 25, vocab_size=30, seed=1)
        script = (
            {"match": "grp1word",
             "response": "Title: Space Exploration\n"
                         "Description: Spaceflight, rockets, orbital missions."},
            {"match": "You are labeling a topic",
             "response": "Title: Generic Theme\nDescription: A group of documents."},
        )
        config = _config(
            tmp_path,
            reducer=ReducerConfig(kind="pca_like", target_dim=20),
            min_cluster_size=12,
            llm=LlmProviderConfig(kind="mock", script=script),
            compute_cosine_topwords=False)
        state = fit(config, texts=texts, n_topics=20)
        assert adjusted_rand_index(labels, state.partition_labels()) == 1.0
        client = TestClient(create_app(config, state=state))
        topics = client.get("/topics").json()
        assert len(topics) == 20
        assert topics[1]["title"] == "Space Exploration"
        assert all(t["title"] == "Generic Theme" for t in topics if t["index"] != 1)


class TestServiceConfig:
    def test_from_file_round_trip(self, tmp_path):
        doc = {
            "listen_address": "127.0.0.1:9000",
            "state_path": str(tmp_path / "s.json"),
            "embedding": {"kind": "local_deterministic",
                          "model_name": "hashed-ngram-v1", "batch_size": 16,
                          "endpoint_url": None, "api_key_env_var": None,
                          "cache_path": None},
            "reducer": {"kind": "pca_like", "target_dim": 5, "random_seed": 0,
                        "umap_n_neighbors": 15, "umap_min_dist": 0.0},
            "n_topics": 7,
            "cors_allowed_origins": ["http://localhost:5173"],
        }
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc))
        config = ServiceConfig.from_file(path)
        assert config.n_topics == 7
        assert config.embedding.batch_size == 16
        assert config.listen_address.endswith(":9000")

    def test_invalid_n_topics(self):
        with pytest.raises(ValueError):
            ServiceConfig(n_topics=0)
