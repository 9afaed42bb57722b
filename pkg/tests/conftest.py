from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from topictalk.clustering import ClusterAssignment
from topictalk.corpus import ingest_corpus
from topictalk.embedding import EmbeddingProviderConfig, build_embedder
from topictalk.reduction import ReducerConfig, fit_reduce
from topictalk.topicstore import ModelConfig, build_topics

from oracles import token_group_corpus


def make_state(n_groups=3, docs_per_group=20, seed=0, namer=None,
               compute_cosine=False, vocab_size=30, prefixes=None):
    """Fit a small state offline: local embedder, pca_like reducer, labels
    taken from the generation groups (no clustering noise in unit tests)."""
    texts, labels = token_group_corpus(n_groups, docs_per_group, seed=seed,
                                       vocab_size=vocab_size, prefixes=prefixes)
    corpus = ingest_corpus(texts, min_token_len=1, stopwords=set())
    embedder = build_embedder(EmbeddingProviderConfig())
    full = np.asarray(embedder.embed_texts(texts), dtype=np.float32)
    reducer_cfg = ReducerConfig(kind="pca_like", target_dim=5)
    reduced64, model = fit_reduce(full, reducer_cfg)
    reduced = reduced64.astype(np.float32)
    assignment = ClusterAssignment(labels=np.array(labels), n_clusters=n_groups)
    config = ModelConfig(reducer=reducer_cfg, compute_cosine_topwords=compute_cosine)
    return build_topics(corpus, full, reduced, assignment, config=config,
                        reducer_model=model, embedder=embedder, namer=namer)


@pytest.fixture
def small_state():
    return make_state()


@pytest.fixture
def local_embedder():
    return build_embedder(EmbeddingProviderConfig())
