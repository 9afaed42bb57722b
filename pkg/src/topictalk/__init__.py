"""topictalk: interactive topic modeling over document embeddings.

Pipeline: embed documents, reduce dimensionality, cluster with HDBSCAN
(optionally Ward-merged to a fixed topic count), extract class-based TF-IDF
top-words, and name each topic with an LLM. Topics can then be queried,
compared, split, merged and deleted, directly or through a function-calling
chat interface.
"""

from .corpus import Corpus, Document, ingest_corpus, tokenize
from .embedding import (
    EmbeddingProviderConfig,
    build_embedder,
    cosine_similarity,
    embed_texts,
    knn_search,
)
from .errors import TopicTalkError
from .reduction import ReducerConfig, fit_reduce, transform
from .service import ServiceConfig, create_app, fit
from .topicstore import (
    ModelConfig,
    Topic,
    TopicModelState,
    build_topics,
    create_topic_keyword,
    delete_topic,
    merge_topics,
    replay_history,
    split_topic_hdbscan,
    split_topic_keyword,
    split_topic_kmeans,
)

__version__ = "0.1.0"

__all__ = [
    "Corpus", "Document", "ingest_corpus", "tokenize",
    "EmbeddingProviderConfig", "build_embedder", "cosine_similarity",
    "embed_texts", "knn_search",
    "ReducerConfig", "fit_reduce", "transform",
    "ModelConfig", "Topic", "TopicModelState", "build_topics",
    "merge_topics", "delete_topic", "split_topic_kmeans",
    "split_topic_hdbscan", "split_topic_keyword", "create_topic_keyword",
    "replay_history",
    "ServiceConfig", "create_app", "fit",
    "TopicTalkError",
]
