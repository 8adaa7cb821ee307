"""Corpus data model: documents, queries, graded relevance edges, query splits.

A corpus lives in a directory with four files (UTF-8, LF line endings):

    documents.jsonl   one object per line: {"id": str, "text": str}
    queries.jsonl     same shape
    edges.tsv         query_id <TAB> doc_id <TAB> grade
    splits.tsv        query_id <TAB> train|dev|test   (optional until split)

Documents are never split; only queries carry a train/dev/test label.
Also provides a planted-group synthetic generator used as the desk-scale
benchmark: each group has a disjoint vocabulary, queries link to documents
of their own group, and a noise rate rewires edges to random groups.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SPLITS = ("train", "dev", "test")


class CorpusError(ValueError):
    """Malformed corpus data: parse failure, dangling reference, duplicate id."""


@dataclass(frozen=True)
class Document:
    id: str
    text: str


@dataclass(frozen=True)
class Query:
    id: str
    text: str


@dataclass(frozen=True)
class RelevanceEdge:
    query_id: str
    doc_id: str
    grade: str


@dataclass
class Corpus:
    """Immutable-after-load container for documents, queries and edges.

    ``split`` maps query_id -> train/dev/test. An empty split map means the
    corpus has not been split yet; a non-empty one must cover every query.
    """

    documents: list[Document]
    queries: list[Query]
    edges: list[RelevanceEdge]
    split: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        doc_ids = set()
        for d in self.documents:
            if d.id in doc_ids:
                raise CorpusError(f"duplicate document id {d.id!r}")
            doc_ids.add(d.id)
        query_ids = set()
        for q in self.queries:
            if q.id in query_ids:
                raise CorpusError(f"duplicate query id {q.id!r}")
            query_ids.add(q.id)
        seen_edges = set()
        for e in self.edges:
            key = (e.query_id, e.doc_id, e.grade)
            if key in seen_edges:
                raise CorpusError(f"duplicate edge {key}")
            seen_edges.add(key)
            if e.query_id not in query_ids:
                raise CorpusError(f"edge references unknown query {e.query_id!r}")
            if e.doc_id not in doc_ids:
                raise CorpusError(f"edge references unknown document {e.doc_id!r}")
        if self.split:
            for qid, s in self.split.items():
                if qid not in query_ids:
                    raise CorpusError(f"split references unknown query {qid!r}")
                if s not in SPLITS:
                    raise CorpusError(f"unknown split label {s!r} for query {qid!r}")
            missing = query_ids - self.split.keys()
            if missing:
                raise CorpusError(
                    f"split does not cover {len(missing)} queries (e.g. {sorted(missing)[0]!r})"
                )

    def doc_index(self) -> dict[str, Document]:
        return {d.id: d for d in self.documents}

    def query_index(self) -> dict[str, Query]:
        return {q.id: q for q in self.queries}

    def query_ids_in_split(self, split: str) -> list[str]:
        return [q.id for q in self.queries if self.split.get(q.id) == split]

    def relevant_docs(
        self, grade_filter: set[str] | None = None, split: str | None = None
    ) -> dict[str, set[str]]:
        """Map query_id -> set of relevant doc ids, optionally filtered by grade
        and restricted to queries of one split. Queries without matching edges
        map to an empty set."""
        if split is not None:
            wanted = set(self.query_ids_in_split(split))
        else:
            wanted = {q.id for q in self.queries}
        rel: dict[str, set[str]] = {qid: set() for qid in wanted}
        for e in self.edges:
            if e.query_id in wanted and (grade_filter is None or e.grade in grade_filter):
                rel[e.query_id].add(e.doc_id)
        return rel


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the planted-group benchmark generator.

    Every group gets ``vocab_per_group`` private tokens; all groups share
    ``shared_vocab`` extra tokens. Texts draw tokens uniformly from the
    union of their group's vocabulary and the shared one. Each query gets
    ``edges_per_query`` edges to distinct documents of its own group; each
    edge is then rewired, with probability ``noise_rate``, to a document of
    a uniformly random group (possibly its own again).

    ``vocab_overlap`` > 0 additionally mixes that fraction of the next
    group's vocabulary (ring order) into each group's drawing pool. This
    gives adjacent groups a merge incentive, so shard balance genuinely
    competes with raw alignment; 0 keeps group vocabularies disjoint.
    """

    n_groups: int = 4
    docs_per_group: int = 500
    queries_per_group: int = 200
    vocab_per_group: int = 50
    shared_vocab: int = 10
    tokens_per_doc: int = 60
    tokens_per_query: int = 16
    edges_per_query: int = 5
    noise_rate: float = 0.05
    vocab_overlap: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        counts = {
            "n_groups": self.n_groups,
            "docs_per_group": self.docs_per_group,
            "queries_per_group": self.queries_per_group,
            "vocab_per_group": self.vocab_per_group,
            "tokens_per_doc": self.tokens_per_doc,
            "tokens_per_query": self.tokens_per_query,
            "edges_per_query": self.edges_per_query,
        }
        for name, value in counts.items():
            if value < 1:
                raise CorpusError(f"{name} must be >= 1, got {value}")
        if self.shared_vocab < 0:
            raise CorpusError(f"shared_vocab must be >= 0, got {self.shared_vocab}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise CorpusError(f"noise_rate must be in [0, 1], got {self.noise_rate}")
        if not 0.0 <= self.vocab_overlap <= 1.0:
            raise CorpusError(f"vocab_overlap must be in [0, 1], got {self.vocab_overlap}")
        if self.edges_per_query > self.docs_per_group:
            raise CorpusError("edges_per_query cannot exceed docs_per_group")


# ---------------------------------------------------------------------------
# loading / saving

def _read_texts_jsonl(path: Path) -> list[tuple[str, str]]:
    out = []
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append((str(obj["id"]), str(obj["text"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path.name}:{lineno}: bad record: {exc}") from exc
    return out


def _read_texts_tsv(path: Path) -> list[tuple[str, str]]:
    out = []
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 1)
            if len(parts) != 2:
                raise CorpusError(f"{path.name}:{lineno}: expected id<TAB>text")
            out.append((parts[0], parts[1]))
    return out


def load_corpus(path: str | Path, format: str = "jsonl") -> Corpus:
    """Load a corpus directory. ``format`` selects the document/query file
    format (jsonl or tsv); edges and splits are always TSV."""
    root = Path(path)
    if format == "jsonl":
        reader, ext = _read_texts_jsonl, "jsonl"
    elif format == "tsv":
        reader, ext = _read_texts_tsv, "tsv"
    else:
        raise CorpusError(f"unknown corpus format {format!r}")

    docs = [Document(i, t) for i, t in reader(root / f"documents.{ext}")]
    queries = [Query(i, t) for i, t in reader(root / f"queries.{ext}")]

    edges = []
    edges_path = root / "edges.tsv"
    with edges_path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CorpusError(f"edges.tsv:{lineno}: expected query_id<TAB>doc_id<TAB>grade")
            edges.append(RelevanceEdge(*parts))

    split: dict[str, str] = {}
    splits_path = root / "splits.tsv"
    if splits_path.exists():
        with splits_path.open("r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise CorpusError(f"splits.tsv:{lineno}: expected query_id<TAB>split")
                split[parts[0]] = parts[1]

    return Corpus(documents=docs, queries=queries, edges=edges, split=split)


def save_corpus(corpus: Corpus, path: str | Path, format: str = "jsonl") -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)

    def dump(records: list[tuple[str, str]], name: str) -> None:
        if format == "jsonl":
            with (root / f"{name}.jsonl").open("w", encoding="utf-8", newline="\n") as f:
                for rid, text in records:
                    f.write(json.dumps({"id": rid, "text": text}, ensure_ascii=False) + "\n")
        elif format == "tsv":
            with (root / f"{name}.tsv").open("w", encoding="utf-8", newline="\n") as f:
                for rid, text in records:
                    f.write(f"{rid}\t{text}\n")
        else:
            raise CorpusError(f"unknown corpus format {format!r}")

    dump([(d.id, d.text) for d in corpus.documents], "documents")
    dump([(q.id, q.text) for q in corpus.queries], "queries")
    with (root / "edges.tsv").open("w", encoding="utf-8", newline="\n") as f:
        for e in corpus.edges:
            f.write(f"{e.query_id}\t{e.doc_id}\t{e.grade}\n")
    if corpus.split:
        with (root / "splits.tsv").open("w", encoding="utf-8", newline="\n") as f:
            for q in corpus.queries:
                f.write(f"{q.id}\t{corpus.split[q.id]}\n")


# ---------------------------------------------------------------------------
# splitting

def split_queries(
    corpus: Corpus, ratios: tuple[float, float, float] = (8, 1, 1), seed: int = 0
) -> Corpus:
    """Assign every query to train/dev/test with sizes proportional to
    ``ratios`` (largest-remainder rounding). Deterministic given seed.
    Returns a new Corpus sharing documents/queries/edges."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise CorpusError(f"ratios must be three nonnegative weights with positive sum: {ratios}")
    n = len(corpus.queries)
    if n < 3:
        raise CorpusError(f"need at least 3 queries to split, got {n}")

    total = float(sum(ratios))
    quotas = [n * r / total for r in ratios]
    counts = [int(q) for q in quotas]
    remainder = n - sum(counts)
    by_frac = sorted(range(3), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in by_frac[:remainder]:
        counts[i] += 1
    for i, r in enumerate(ratios):
        if r > 0 and counts[i] == 0:
            raise CorpusError(
                f"too few queries ({n}) to populate all three splits with ratios {ratios}"
            )

    ids = sorted(q.id for q in corpus.queries)
    order = np.random.default_rng(seed).permutation(n)
    split: dict[str, str] = {}
    pos = 0
    for label, count in zip(SPLITS, counts):
        for j in order[pos : pos + count]:
            split[ids[j]] = label
        pos += count
    return replace(corpus, split=split)


# ---------------------------------------------------------------------------
# synthetic generation

def generate_synthetic(spec: SyntheticSpec) -> Corpus:
    """Generate a planted-group corpus per ``spec``. Deterministic given seed;
    the returned corpus has no split (call split_queries afterwards)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    group_vocab = [
        [f"g{g}w{j}" for j in range(spec.vocab_per_group)] for g in range(spec.n_groups)
    ]
    shared = [f"sw{j}" for j in range(spec.shared_vocab)]
    n_overlap = int(spec.vocab_overlap * spec.vocab_per_group)
    pools = []
    for g in range(spec.n_groups):
        pool = group_vocab[g] + shared
        if n_overlap:
            pool = pool + group_vocab[(g + 1) % spec.n_groups][:n_overlap]
        pools.append(np.array(pool))

    documents: list[Document] = []
    queries: list[Query] = []
    for g in range(spec.n_groups):
        pool = pools[g]
        for i in range(spec.docs_per_group):
            tokens = rng.choice(pool, size=spec.tokens_per_doc)
            documents.append(Document(f"g{g}-d{i}", " ".join(tokens)))
        for i in range(spec.queries_per_group):
            tokens = rng.choice(pool, size=spec.tokens_per_query)
            queries.append(Query(f"g{g}-q{i}", " ".join(tokens)))

    edges: list[RelevanceEdge] = []
    for g in range(spec.n_groups):
        for i in range(spec.queries_per_group):
            qid = f"g{g}-q{i}"
            base = rng.choice(spec.docs_per_group, size=spec.edges_per_query, replace=False)
            targets: set[tuple[int, int]] = set()
            for d in base:
                if spec.noise_rate > 0 and rng.random() < spec.noise_rate:
                    # rewire to a uniformly random group (possibly the same one)
                    tg = int(rng.integers(spec.n_groups))
                    td = int(rng.integers(spec.docs_per_group))
                    while (tg, td) in targets:
                        tg = int(rng.integers(spec.n_groups))
                        td = int(rng.integers(spec.docs_per_group))
                else:
                    # a rewired edge may have landed on this doc already; stay in-group
                    tg, td = g, int(d)
                    while (tg, td) in targets:
                        td = int(rng.integers(spec.docs_per_group))
                targets.add((tg, td))
                edges.append(RelevanceEdge(qid, f"g{tg}-d{td}", "impression"))

    return Corpus(documents=documents, queries=queries, edges=edges)


def synthetic_group(item_id: str) -> int:
    """Planted group of a synthetic document/query id (format g<G>-...)."""
    if not item_id.startswith("g"):
        raise CorpusError(f"not a synthetic id: {item_id!r}")
    return int(item_id[1 : item_id.index("-")])


# ---------------------------------------------------------------------------
# training pairs

def training_pairs(
    corpus: Corpus, grade_filter: set[str] | None = None
) -> list[tuple[str, str]]:
    """All (query_id, doc_id) edges whose query is in the train split and whose
    grade passes the filter (None = all grades). This sequence is the empirical
    pair distribution sampled during training. Grades are not expanded by
    entailment: only edges present in the data count."""
    if not corpus.split:
        raise CorpusError("corpus has no split; call split_queries first")
    pairs = [
        (e.query_id, e.doc_id)
        for e in corpus.edges
        if corpus.split.get(e.query_id) == "train"
        and (grade_filter is None or e.grade in grade_filter)
    ]
    if not pairs:
        raise CorpusError(f"no training edges match grade filter {grade_filter!r}")
    return pairs
