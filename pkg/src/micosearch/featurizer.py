"""Vocabulary construction and TF-IDF sparse vectorization.

Tokens are lowercased and split on unicode whitespace/punctuation; the
vocabulary keeps the most frequent tokens (ties broken lexicographically)
up to a size cap. TF is the raw in-text count; IDF defaults to ln(N/df)
with a smoothed variant available. Vectors are L2-normalized by default.

With ``separate_vocab`` the queries and the documents get independent
vocabularies (and therefore different model input dimensions), which is
what cross-lingual retrieval needs.
"""

from __future__ import annotations

import hashlib
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import scipy.sparse as sp

from .corpus import Corpus

# letters and digits only: underscores count as punctuation
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

IDF_VARIANTS = ("ln", "smooth")


class FeaturizerError(ValueError):
    pass


@dataclass(frozen=True)
class FeaturizerConfig:
    vocab_size: int = 20000
    stopwords: frozenset[str] = frozenset()
    separate_vocab: bool = False
    idf_variant: str = "ln"  # ln(N/df), or "smooth": ln((1+N)/(1+df)) + 1
    l2_normalize: bool = True

    def validate(self) -> None:
        if self.vocab_size < 1:
            raise FeaturizerError(f"vocab_size must be >= 1, got {self.vocab_size}")
        if self.idf_variant not in IDF_VARIANTS:
            raise FeaturizerError(f"idf_variant must be one of {IDF_VARIANTS}")


def config_hash(config: FeaturizerConfig) -> str:
    """Stable short hash of a featurizer configuration."""
    key = "|".join(
        [
            str(config.vocab_size),
            ",".join(sorted(config.stopwords)),
            str(config.separate_vocab),
            config.idf_variant,
            str(config.l2_normalize),
        ]
    )
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True)
class SparseVector:
    """Sorted sparse feature vector: strictly increasing indices, weights > 0."""

    indices: np.ndarray  # int64
    weights: np.ndarray  # float64

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.weights**2)))


EMPTY_VECTOR = SparseVector(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))


@dataclass
class Vocabulary:
    index: dict[str, int]  # token -> dense index in [0, size)
    df: dict[str, int]  # token -> number of texts containing it
    corpus_size: int
    max_size: int

    @property
    def size(self) -> int:
        return len(self.index)


def tokenize(text: str, stopwords: Iterable[str] = ()) -> list[str]:
    """Lowercase and split on whitespace/punctuation, dropping stop words.
    Duplicates are preserved; empty text gives an empty list."""
    stop = stopwords if isinstance(stopwords, (set, frozenset)) else set(stopwords)
    return [t for t in _TOKEN_RE.findall(text.lower()) if t not in stop]


def build_vocab(texts: Iterable[list[str]], config: FeaturizerConfig) -> Vocabulary:
    """Rank tokens by total frequency (ties lexicographic) and keep the top
    ``vocab_size``. df counts the number of texts containing each token."""
    config.validate()
    freq: Counter[str] = Counter()
    df: Counter[str] = Counter()
    n_texts = 0
    for tokens in texts:
        n_texts += 1
        freq.update(tokens)
        df.update(set(tokens))
    if not freq:
        raise FeaturizerError("no tokens in input stream")
    ranked = sorted(freq, key=lambda t: (-freq[t], t))[: config.vocab_size]
    return Vocabulary(
        index={t: i for i, t in enumerate(ranked)},
        df={t: df[t] for t in ranked},
        corpus_size=n_texts,
        max_size=config.vocab_size,
    )


def _idf(variant: str, n: int, df: int) -> float:
    if variant == "ln":
        return math.log(n / df)
    return math.log((1 + n) / (1 + df)) + 1.0


def tfidf(tokens: list[str], vocab: Vocabulary, config: FeaturizerConfig) -> SparseVector:
    """TF-IDF vector of a token list. Out-of-vocabulary tokens are dropped,
    zero-weight entries (df == corpus size under the ln variant) too; an
    all-OOV text maps to the empty vector."""
    counts = Counter(t for t in tokens if t in vocab.index)
    if not counts:
        return EMPTY_VECTOR
    idx = []
    w = []
    for token, tf in counts.items():
        weight = tf * _idf(config.idf_variant, vocab.corpus_size, vocab.df[token])
        if weight > 0.0:
            idx.append(vocab.index[token])
            w.append(weight)
    if not idx:
        return EMPTY_VECTOR
    order = np.argsort(idx)
    indices = np.asarray(idx, dtype=np.int64)[order]
    weights = np.asarray(w, dtype=np.float64)[order]
    if config.l2_normalize:
        weights = weights / np.sqrt(np.sum(weights**2))
    return SparseVector(indices, weights)


# ---------------------------------------------------------------------------
# corpus-level featurization

@dataclass
class FeatureSet:
    """TF-IDF vectors for all queries and documents of a corpus."""

    query_vectors: dict[str, SparseVector]
    doc_vectors: dict[str, SparseVector]
    query_dim: int
    doc_dim: int
    query_vocab: Vocabulary = field(repr=False, default=None)
    doc_vocab: Vocabulary = field(repr=False, default=None)


def featurize_corpus(corpus: Corpus, config: FeaturizerConfig) -> FeatureSet:
    """Tokenize and vectorize every query and document. With a unified
    vocabulary it is built over documents and queries together; with
    ``separate_vocab`` each side gets its own."""
    doc_tokens = {d.id: tokenize(d.text, config.stopwords) for d in corpus.documents}
    query_tokens = {q.id: tokenize(q.text, config.stopwords) for q in corpus.queries}
    if config.separate_vocab:
        doc_vocab = build_vocab(doc_tokens.values(), config)
        query_vocab = build_vocab(query_tokens.values(), config)
    else:
        combined: Iterator[list[str]] = iter(
            list(doc_tokens.values()) + list(query_tokens.values())
        )
        doc_vocab = build_vocab(combined, config)
        query_vocab = doc_vocab
    return FeatureSet(
        query_vectors={qid: tfidf(t, query_vocab, config) for qid, t in query_tokens.items()},
        doc_vectors={did: tfidf(t, doc_vocab, config) for did, t in doc_tokens.items()},
        query_dim=query_vocab.size,
        doc_dim=doc_vocab.size,
        query_vocab=query_vocab,
        doc_vocab=doc_vocab,
    )


def stack_vectors(vectors: list[SparseVector], dim: int) -> sp.csr_matrix:
    """Stack sparse vectors into one CSR matrix [n x dim]."""
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    for i, v in enumerate(vectors):
        indptr[i + 1] = indptr[i] + v.nnz
    if vectors:
        indices = np.concatenate([v.indices for v in vectors])
        data = np.concatenate([v.weights for v in vectors])
    else:
        indices = np.empty(0, dtype=np.int64)
        data = np.empty(0, dtype=np.float64)
    if len(indices) and indices.max() >= dim:
        raise FeaturizerError(f"vector index {indices.max()} out of range for dim {dim}")
    return sp.csr_matrix((data, indices, indptr), shape=(len(vectors), dim))


def densify(vectors: dict[str, SparseVector], dim: int) -> tuple[list[str], np.ndarray]:
    """Dense matrix of all vectors, row order = sorted ids."""
    ids = sorted(vectors)
    mat = stack_vectors([vectors[i] for i in ids], dim).toarray()
    return ids, mat


# ---------------------------------------------------------------------------
# persistence

def save_vocab(vocab: Vocabulary, config: FeaturizerConfig, path: str | Path) -> None:
    """vocab.tsv: header with corpus_size and config hash, then
    token <TAB> index <TAB> df, one row per token in index order."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as f:
        f.write(f"#corpus_size={vocab.corpus_size}\tconfig_hash={config_hash(config)}\n")
        for token, i in sorted(vocab.index.items(), key=lambda kv: kv[1]):
            f.write(f"{token}\t{i}\t{vocab.df[token]}\n")


def load_vocab(path: str | Path) -> tuple[Vocabulary, str]:
    """Returns (vocabulary, config hash from the header)."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if not header.startswith("#corpus_size="):
            raise FeaturizerError(f"{path.name}:1: missing vocab header")
        fields = dict(kv.split("=", 1) for kv in header[1:].split("\t"))
        index: dict[str, int] = {}
        df: dict[str, int] = {}
        for lineno, line in enumerate(f, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FeaturizerError(f"{path.name}:{lineno}: expected token<TAB>index<TAB>df")
            token, idx, d = parts
            index[token] = int(idx)
            df[token] = int(d)
    vocab = Vocabulary(
        index=index, df=df, corpus_size=int(fields["corpus_size"]), max_size=max(len(index), 1)
    )
    return vocab, fields["config_hash"]


def save_vectors(vectors: dict[str, SparseVector], path: str | Path) -> None:
    """id <TAB> index:weight,index:weight,... with 9 significant digits."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as f:
        for vid, vec in vectors.items():
            entries = ",".join(
                f"{i}:{w:.9g}" for i, w in zip(vec.indices, vec.weights)
            )
            f.write(f"{vid}\t{entries}\n")


def load_vectors(path: str | Path) -> dict[str, SparseVector]:
    path = Path(path)
    out: dict[str, SparseVector] = {}
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            vid, _, entries = line.partition("\t")
            if not entries:
                out[vid] = EMPTY_VECTOR
                continue
            try:
                pairs = [e.split(":") for e in entries.split(",")]
                indices = np.array([int(i) for i, _ in pairs], dtype=np.int64)
                weights = np.array([float(w) for _, w in pairs], dtype=np.float64)
            except ValueError as exc:
                raise FeaturizerError(f"{path.name}:{lineno}: bad vector entry: {exc}") from exc
            out[vid] = SparseVector(indices, weights)
    return out
