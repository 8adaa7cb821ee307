"""Selective search by co-trained document sharding and query routing.

The pipeline: load or synthesize a corpus of queries, documents, and graded
relevance edges; build TF-IDF features; co-train a document allocator and a
query router against an information-theoretic objective with an entropy
term that balances shard sizes; then shard the corpus, route unseen
queries, and score coverage and search costs against baselines.
"""

from .corpus import (
    Corpus,
    CorpusError,
    Document,
    Query,
    RelevanceEdge,
    SyntheticSpec,
    generate_synthetic,
    load_corpus,
    save_corpus,
    split_queries,
    training_pairs,
)
from .featurizer import (
    FeaturizerConfig,
    FeatureSet,
    SparseVector,
    Vocabulary,
    build_vocab,
    featurize_corpus,
    tfidf,
    tokenize,
)
from .model import MicoModel, init_model, load_checkpoint, save_checkpoint
from .trainer import Batch, LossBreakdown, TrainConfig, fit, mico_loss, train_step
from .selective_search import RoutingResult, ShardMap, assign_documents, route_query
from .evaluation import EvalReport, aggregate_runs, coverage_at, cost_at, evaluate, shard_balance
from .baselines import CentroidModel, balanced_kmeans_shard, kmeans_shard, random_shard

__version__ = "0.1.0"
