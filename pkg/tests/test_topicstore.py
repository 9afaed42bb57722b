from __future__ import annotations

import numpy as np
import pytest

from topictalk.clustering import ClusterAssignment
from topictalk.embedding import cosine_similarity
from topictalk.errors import (
    EmptyKeyword,
    InvalidTopicIndex,
    LastTopic,
    NeedAtLeastTwo,
    TooFewDocuments,
)
from topictalk.topicstore import (
    build_topics,
    create_topic_keyword,
    delete_topic,
    merge_topics,
    replay_history,
    split_topic_hdbscan,
    split_topic_keyword,
    split_topic_kmeans,
)

from conftest import make_state


def assert_partition(state):
    """doc_ids pairwise disjoint, union complete, indices dense."""
    seen: set[int] = set()
    for pos, t in enumerate(state.topics):
        assert t.index == pos
        assert t.doc_ids, f"topic {pos} empty"
        assert not (seen & t.doc_ids)
        seen |= t.doc_ids
    assert seen == set(range(len(state.corpus)))


def assert_centroids_rederivable(state, tol=1e-9):
    for t in state.topics:
        full = state.full_matrix[sorted(t.doc_ids)].mean(axis=0, dtype=np.float64)
        red = state.reduced_matrix[sorted(t.doc_ids)].mean(axis=0, dtype=np.float64)
        assert np.max(np.abs(full - t.centroid_full)) <= tol
        assert np.max(np.abs(red - t.centroid_reduced)) <= tol


class TestBuildTopics:
    def test_three_clusters_partition(self, small_state):
        assert len(small_state.topics) == 3
        assert_partition(small_state)
        assert small_state.version == 0

    def test_single_cluster_centroid_is_corpus_mean(self):
        state = make_state(n_groups=1, docs_per_group=15)
        centroid = state.topics[0].centroid_full
        want = state.full_matrix.mean(axis=0, dtype=np.float64)
        assert np.max(np.abs(centroid - want)) <= 1e-9

    def test_placeholder_titles_without_namer(self, small_state):
        assert [t.title for t in small_state.topics] == \
            ["Topic 0", "Topic 1", "Topic 2"]

    def test_namer_applied(self):
        state = make_state(namer=lambda words, i: (f"Theme {i}", f"About {i}"))
        assert state.topics[1].title == "Theme 1"
        assert state.topics[1].description == "About 1"

    def test_rejects_noise(self, small_state):
        with pytest.raises(ValueError):
            build_topics(small_state.corpus, small_state.full_matrix,
                         small_state.reduced_matrix,
                         ClusterAssignment(labels=np.array(
                             [-1] * len(small_state.corpus)), n_clusters=0))


class TestMerge:
    def test_merge_two_of_three(self, small_state):
        old1 = small_state.topics[1].doc_ids
        old2 = small_state.topics[2].doc_ids
        merged = merge_topics(small_state, {1, 2})
        assert len(merged.topics) == 2
        assert merged.topics[1].doc_ids == old1 | old2
        assert merged.version == 1
        assert merged.history[-1].kind == "merge"
        assert_partition(merged)

    def test_merge_all(self, small_state):
        merged = merge_topics(small_state, {0, 1, 2})
        assert len(merged.topics) == 1
        assert merged.topics[0].doc_ids == set(range(len(small_state.corpus)))

    def test_merged_centroid_is_weighted_mean(self, small_state):
        a, b = small_state.topics[0], small_state.topics[2]
        merged = merge_topics(small_state, {0, 2})
        want = (a.size * a.centroid_full + b.size * b.centroid_full) / (a.size + b.size)
        assert np.max(np.abs(merged.topics[0].centroid_full - want)) <= 1e-9
        assert_centroids_rederivable(merged)

    def test_merge_position_is_min_index(self, small_state):
        merged = merge_topics(small_state, {1, 2})
        assert merged.topics[0].doc_ids == small_state.topics[0].doc_ids

    def test_validation(self, small_state):
        with pytest.raises(NeedAtLeastTwo):
            merge_topics(small_state, {1})
        with pytest.raises(InvalidTopicIndex):
            merge_topics(small_state, {0, 9})


class TestDelete:
    def test_two_topic_delete_moves_everything(self):
        state = make_state(n_groups=2)
        deleted = delete_topic(state, 1)
        assert len(deleted.topics) == 1
        assert deleted.topics[0].doc_ids == set(range(len(state.corpus)))
        assert_partition(deleted)

    def test_documents_go_to_nearest_centroid(self, small_state):
        deleted = delete_topic(small_state, 0)
        centroids = [t.centroid_full for t in small_state.topics[1:]]
        labels = deleted.partition_labels()
        for did in sorted(small_state.topics[0].doc_ids):
            sims = [cosine_similarity(small_state.full_matrix[did], c)
                    for c in centroids]
            assert labels[did] == int(np.argmax(sims))

    def test_conservation(self, small_state):
        deleted = delete_topic(small_state, 1)
        assert sum(t.size for t in deleted.topics) == len(small_state.corpus)
        assert_partition(deleted)
        assert_centroids_rederivable(deleted)

    def test_last_topic_protected(self):
        state = make_state(n_groups=1)
        with pytest.raises(LastTopic):
            delete_topic(state, 0)

    def test_invalid_index(self, small_state):
        with pytest.raises(InvalidTopicIndex):
            delete_topic(small_state, 5)


class TestSplitKmeans:
    def test_two_group_topic_splits_cleanly(self):
        # one merged topic holding two token-disjoint groups
        state = make_state(n_groups=3)
        merged = merge_topics(state, {0, 1})
        split = split_topic_kmeans(merged, 0, 2, seed=5)
        assert len(split.topics) == 3
        got = {frozenset(split.topics[0].doc_ids), frozenset(split.topics[2].doc_ids)}
        want = {frozenset(state.topics[0].doc_ids), frozenset(state.topics[1].doc_ids)}
        assert got == want
        assert_partition(split)

    def test_five_subtopics_replace_topic(self):
        state = make_state(n_groups=3, docs_per_group=30)
        split = split_topic_kmeans(state, 2, 5, seed=1)
        assert len(split.topics) == 3 - 1 + 5
        assert split.history[-1].params["n_clusters"] == 5

    def test_union_preserved(self, small_state):
        split = split_topic_kmeans(small_state, 1, 3, seed=2)
        new_ids = split.topics[1].doc_ids | split.topics[3].doc_ids | \
            split.topics[4].doc_ids
        assert new_ids == small_state.topics[1].doc_ids

    def test_too_few_documents(self, small_state):
        with pytest.raises(TooFewDocuments):
            split_topic_kmeans(small_state, 0, 999, seed=0)

    def test_replacement_positions(self, small_state):
        split = split_topic_kmeans(small_state, 1, 2, seed=0)
        assert split.topics[0].doc_ids == small_state.topics[0].doc_ids
        assert split.topics[2].doc_ids == small_state.topics[2].doc_ids


class TestSplitHdbscan:
    def test_dense_single_blob_is_noop(self):
        state = make_state(n_groups=1, docs_per_group=40)
        split = split_topic_hdbscan(state, 0, min_cluster_size=10)
        assert len(split.topics) == 1
        assert split.topics[0].doc_ids == state.topics[0].doc_ids
        assert split.version == 1
        assert split.history[-1].noop

    def test_two_blobs_split(self):
        state = make_state(n_groups=2, docs_per_group=30)
        merged = merge_topics(state, {0, 1})
        split = split_topic_hdbscan(merged, 0, min_cluster_size=10)
        assert len(split.topics) == 2
        got = {frozenset(t.doc_ids) for t in split.topics}
        want = {frozenset(state.topics[0].doc_ids), frozenset(state.topics[1].doc_ids)}
        assert got == want

    def test_conservation(self):
        state = make_state(n_groups=2, docs_per_group=25)
        merged = merge_topics(state, {0, 1})
        split = split_topic_hdbscan(merged, 0, min_cluster_size=8)
        assert_partition(split)
        assert_centroids_rederivable(split)

    def test_too_few_documents(self, small_state):
        with pytest.raises(TooFewDocuments):
            split_topic_hdbscan(small_state, 0, min_cluster_size=100)


class TestSplitKeyword:
    def test_rule_holds_exhaustively(self, small_state):
        keyword = small_state.corpus.documents[5].text  # verbatim doc text
        before = small_state.topics[0].doc_ids
        centroid = small_state.topics[0].centroid_full
        split = split_topic_keyword(small_state, 0, keyword)
        query = np.asarray(small_state.embedder.embed_text(keyword))
        if split.history[-1].noop:
            pytest.skip("degenerate geometry made the split a no-op")
        new_topic = split.topics[-1]
        for did in sorted(before):
            qsim = cosine_similarity(small_state.full_matrix[did], query)
            csim = cosine_similarity(small_state.full_matrix[did], centroid)
            assert (did in new_topic.doc_ids) == (qsim > csim)
        assert_partition(split)

    def test_keyword_equal_to_centroid_is_noop(self, small_state, monkeypatch):
        centroid = small_state.topics[0].centroid_full.tolist()
        monkeypatch.setattr(small_state.embedder, "embed_texts",
                            lambda texts: [centroid for _ in texts])
        split = split_topic_keyword(small_state, 0, "whatever")
        assert split.history[-1].noop
        assert [t.doc_ids for t in split.topics] == \
            [t.doc_ids for t in small_state.topics]

    def test_constructed_three_of_ten_move(self, small_state, monkeypatch):
        topic = small_state.topics[0]
        ids = sorted(topic.doc_ids)[:10]
        chosen = set(ids[:3])
        # synthetic query: exactly the mean of the chosen documents, far from rest
        fake = small_state.full_matrix[sorted(chosen)].mean(axis=0) * 5.0
        monkeypatch.setattr(small_state.embedder, "embed_texts",
                            lambda texts: [fake.tolist() for _ in texts])
        split = split_topic_keyword(small_state, 0, "synthetic")
        new_topic = split.topics[-1]
        moved = {did for did in topic.doc_ids
                 if cosine_similarity(small_state.full_matrix[did], fake)
                 > cosine_similarity(small_state.full_matrix[did],
                                     topic.centroid_full)}
        assert new_topic.doc_ids == moved

    def test_empty_keyword(self, small_state):
        with pytest.raises(EmptyKeyword):
            split_topic_keyword(small_state, 0, "  ")


class TestCreateKeyword:
    def test_rule_holds_across_all_topics(self, small_state):
        keyword = small_state.corpus.documents[0].text
        centroids = {t.index: t.centroid_full for t in small_state.topics}
        labels_before = small_state.partition_labels()
        created = create_topic_keyword(small_state, keyword)
        query = np.asarray(small_state.embedder.embed_text(keyword))
        if created.history[-1].noop:
            pytest.skip("no document qualified")
        new_topic = created.topics[-1]
        for did in range(len(small_state.corpus)):
            own = centroids[int(labels_before[did])]
            qualifies = cosine_similarity(small_state.full_matrix[did], query) > \
                cosine_similarity(small_state.full_matrix[did], own)
            assert (did in new_topic.doc_ids) == qualifies
        assert_partition(created)

    def test_orthogonal_keyword_is_noop(self, small_state):
        # disjoint token universe: near-zero similarity to every document
        created = create_topic_keyword(small_state, "zzz unrelated keyword qqq")
        query = np.asarray(small_state.embedder.embed_text("zzz unrelated keyword qqq"))
        labels = small_state.partition_labels()
        expect_moved = any(
            cosine_similarity(small_state.full_matrix[d], query)
            > cosine_similarity(small_state.full_matrix[d],
                                small_state.topics[int(labels[d])].centroid_full)
            for d in range(len(small_state.corpus)))
        assert created.history[-1].noop == (not expect_moved)

    def test_document_matching_keyword_moves(self, small_state):
        text = small_state.corpus.documents[10].text
        created = create_topic_keyword(small_state, text)
        assert not created.history[-1].noop
        assert 10 in created.topics[-1].doc_ids

    def test_conservation(self, small_state):
        created = create_topic_keyword(small_state,
                                       small_state.corpus.documents[3].text)
        assert sum(t.size for t in created.topics) == len(small_state.corpus)
        assert_partition(created)

    def test_empty_keyword(self, small_state):
        with pytest.raises(EmptyKeyword):
            create_topic_keyword(small_state, "")


class TestHistoryAndVersioning:
    def test_version_increments_once_per_modification(self, small_state):
        s1 = merge_topics(small_state, {0, 1})
        s2 = delete_topic(s1, 0)
        s3 = split_topic_kmeans(s2, 0, 2, seed=0)
        assert [small_state.version, s1.version, s2.version, s3.version] == \
            [0, 1, 2, 3]
        assert len(s3.history) == 3

    def test_replay_reproduces_partition(self, small_state):
        s = merge_topics(small_state, {0, 2})
        s = split_topic_kmeans(s, 0, 2, seed=9)
        s = create_topic_keyword(s, small_state.corpus.documents[7].text)
        s = delete_topic(s, 1)
        replayed = replay_history(s)
        assert np.array_equal(replayed, s.partition_labels())

    def test_merge_then_split_back_restores_partition(self, small_state):
        parts = {frozenset(t.doc_ids) for t in small_state.topics}
        merged = merge_topics(small_state, {1, 2})
        # split by the same sub-partition via a keyword equal to one part's docs
        docs_1 = small_state.topics[1].doc_ids
        back = split_topic_kmeans(merged, 1, 2, seed=4)
        restored = {frozenset(t.doc_ids) for t in back.topics}
        # kmeans on token-disjoint groups recovers the original two parts
        assert restored == parts
        assert docs_1 in restored

    def test_original_state_never_mutated(self, small_state):
        before = [t.doc_ids for t in small_state.topics]
        merge_topics(small_state, {0, 1})
        delete_topic(small_state, 2)
        assert [t.doc_ids for t in small_state.topics] == before
        assert small_state.version == 0


class TestModificationFuzzer:
    def test_random_operations_keep_invariants(self):
        state = make_state(n_groups=4, docs_per_group=15, seed=3)
        rng = np.random.default_rng(0)
        ops = 0
        while ops < 60:
            kind = rng.choice(["merge", "delete", "split_kmeans", "split_keyword",
                               "create_keyword", "split_hdbscan"])
            t = int(rng.integers(len(state.topics)))
            try:
                if kind == "merge" and len(state.topics) >= 2:
                    pair = rng.choice(len(state.topics), size=2, replace=False)
                    state = merge_topics(state, [int(x) for x in pair])
                elif kind == "delete" and len(state.topics) >= 2:
                    state = delete_topic(state, t)
                elif kind == "split_kmeans":
                    state = split_topic_kmeans(state, t, 2, seed=int(rng.integers(100)))
                elif kind == "split_hdbscan":
                    state = split_topic_hdbscan(state, t, 5)
                elif kind == "split_keyword":
                    did = int(rng.integers(len(state.corpus)))
                    state = split_topic_keyword(state, t,
                                                state.corpus.documents[did].text)
                else:
                    did = int(rng.integers(len(state.corpus)))
                    state = create_topic_keyword(state,
                                                 state.corpus.documents[did].text)
            except (TooFewDocuments, LastTopic, NeedAtLeastTwo):
                continue
            ops += 1
            assert_partition(state)
            assert_centroids_rederivable(state)
        replayed = replay_history(state)
        assert np.array_equal(replayed, state.partition_labels())
