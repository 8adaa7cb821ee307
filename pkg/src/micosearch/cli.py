"""Command-line pipeline: synth, vocab, featurize, train, shard, route,
eval, baseline, report.

All commands read an optional TOML config file plus flag overrides and
work against one artifact directory (``workdir``). Exit codes: 0 success,
1 runtime failure (e.g. a missing upstream artifact), 2 usage/config error.
Every command is deterministic given its inputs and seeds; the optional
THREADS environment variable caps the numeric library's thread pool.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib


class UsageError(Exception):
    """Bad flag or config value: exits with code 2."""


class StageError(Exception):
    """Missing or unusable upstream artifact: exits with code 1."""


DEFAULT_EVAL_NS = [1, 3, 5, 10, 30]


@dataclass
class PipelineConfig:
    workdir: Path = Path("run")
    corpus_dir: Path | None = None
    corpus_format: str = "jsonl"
    k: int = 64
    hidden_dim: int = 20
    share_towers: bool = False
    eval_ns: list[int] = field(default_factory=lambda: list(DEFAULT_EVAL_NS))
    runs: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    grades: list[str] | None = None  # None = all grades
    # featurizer
    vocab_size: int = 20000
    stopwords_file: str | None = None
    separate_vocab: bool = False
    idf_variant: str = "ln"
    l2_normalize: bool = True
    # training
    variant: str = "mico"
    beta: float | None = None
    gamma: float | None = None
    batch_size: int = 256
    lr_towers: float = 0.03
    lr_theta: float = 0.1
    clip_norm: float | None = None
    theta_steps: int | None = None
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0

    # artifact paths (derived from workdir unless set in the config file)
    def path(self, name: str) -> Path:
        return self.workdir / name

    @property
    def corpus(self) -> Path:
        return self.corpus_dir if self.corpus_dir is not None else self.workdir / "corpus"

    def featurizer_config(self):
        from .featurizer import FeaturizerConfig

        stopwords: frozenset[str] = frozenset()
        if self.stopwords_file:
            p = Path(self.stopwords_file)
            if not p.exists():
                raise StageError(f"stopwords file not found: {p}")
            stopwords = frozenset(
                t.strip() for t in p.read_text(encoding="utf-8").splitlines() if t.strip()
            )
        return FeaturizerConfig(
            vocab_size=self.vocab_size,
            stopwords=stopwords,
            separate_vocab=self.separate_vocab,
            idf_variant=self.idf_variant,
            l2_normalize=self.l2_normalize,
        )

    def train_config(self):
        from .trainer import TrainConfig

        return TrainConfig(
            variant=self.variant.replace("-", "_"),
            beta=self.beta,
            gamma=self.gamma,
            batch_size=self.batch_size,
            lr_towers=self.lr_towers,
            lr_theta=self.lr_theta,
            clip_norm=self.clip_norm,
            theta_steps=self.theta_steps,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.seed,
        ).resolved()

    def config_hash(self) -> int:
        """64-bit hash over everything that shapes the trained model."""
        key = json.dumps(
            {
                "k": self.k,
                "hidden_dim": self.hidden_dim,
                "share_towers": self.share_towers,
                "vocab_size": self.vocab_size,
                "separate_vocab": self.separate_vocab,
                "idf_variant": self.idf_variant,
                "l2_normalize": self.l2_normalize,
                "variant": self.variant,
                "beta": self.beta,
                "gamma": self.gamma,
                "batch_size": self.batch_size,
                "lr_towers": self.lr_towers,
                "lr_theta": self.lr_theta,
                "clip_norm": self.clip_norm,
                "theta_steps": self.theta_steps,
                "seed": self.seed,
            },
            sort_keys=True,
        )
        return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")


_FIELD_TYPES = {f.name: f for f in fields(PipelineConfig)}


def load_pipeline_config(path: str | Path | None, overrides: dict) -> PipelineConfig:
    """Config file values first, then flag overrides on top."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        try:
            values.update(tomllib.loads(p.read_text(encoding="utf-8")))
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"bad config file {p}: {exc}") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})

    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    if "workdir" in values:
        values["workdir"] = Path(values["workdir"])
    if values.get("corpus_dir") is not None:
        values["corpus_dir"] = Path(values["corpus_dir"])
    cfg = PipelineConfig(**values)
    if cfg.k < 2:
        raise UsageError(f"k must be >= 2, got {cfg.k}")
    if any(n < 1 or n > cfg.k for n in cfg.eval_ns):
        raise UsageError(f"eval_ns must lie in [1, k={cfg.k}]: {cfg.eval_ns}")
    return cfg


# ---------------------------------------------------------------------------
# shared helpers

def _require(path: Path, stage: str, hint: str) -> Path:
    if not path.exists():
        raise StageError(f"{stage}: missing {path} (run `{hint}` first)")
    return path


def _load_corpus(cfg: PipelineConfig, stage: str):
    from .corpus import load_corpus

    _require(cfg.corpus, stage, "synth")
    return load_corpus(cfg.corpus, cfg.corpus_format)


def _vocab_paths(cfg: PipelineConfig) -> dict[str, Path]:
    if cfg.separate_vocab:
        return {"query": cfg.path("vocab.query.tsv"), "doc": cfg.path("vocab.doc.tsv")}
    return {"both": cfg.path("vocab.tsv")}


def _grade_filter(cfg: PipelineConfig) -> set[str] | None:
    return set(cfg.grades) if cfg.grades else None


def _load_features(cfg: PipelineConfig, stage: str):
    from .featurizer import FeatureSet, load_vectors, load_vocab

    paths = _vocab_paths(cfg)
    for p in paths.values():
        _require(p, stage, "vocab")
    qv_path = _require(cfg.path("features.query.tsv"), stage, "featurize")
    dv_path = _require(cfg.path("features.doc.tsv"), stage, "featurize")
    if cfg.separate_vocab:
        query_vocab, _ = load_vocab(paths["query"])
        doc_vocab, _ = load_vocab(paths["doc"])
    else:
        query_vocab, _ = load_vocab(paths["both"])
        doc_vocab = query_vocab
    return FeatureSet(
        query_vectors=load_vectors(qv_path),
        doc_vectors=load_vectors(dv_path),
        query_dim=query_vocab.size,
        doc_dim=doc_vocab.size,
        query_vocab=query_vocab,
        doc_vocab=doc_vocab,
    )


def _full_routings(model, features, query_ids):
    from .selective_search import route_query

    return {
        qid: route_query(model, features.query_vectors[qid], model.n_clusters, qid)
        for qid in query_ids
    }


# ---------------------------------------------------------------------------
# commands

def cmd_synth(cfg: PipelineConfig, args) -> int:
    from .corpus import CorpusError, SyntheticSpec, generate_synthetic, save_corpus, split_queries

    spec = SyntheticSpec(
        n_groups=args.groups,
        docs_per_group=args.docs_per_group,
        queries_per_group=args.queries_per_group,
        vocab_per_group=args.vocab_per_group,
        shared_vocab=args.shared_vocab,
        tokens_per_doc=args.tokens_per_doc,
        tokens_per_query=args.tokens_per_query,
        edges_per_query=args.edges_per_query,
        noise_rate=args.noise_rate,
        vocab_overlap=args.vocab_overlap,
        seed=cfg.seed,
    )
    try:
        spec.validate()
        ratios = _parse_ratios(args.ratios)
    except CorpusError as exc:
        raise UsageError(str(exc)) from exc
    corpus = generate_synthetic(spec)
    corpus = split_queries(corpus, ratios, seed=cfg.seed)
    cfg.corpus.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, cfg.corpus, cfg.corpus_format)
    print(
        f"synth: wrote {len(corpus.documents)} docs, {len(corpus.queries)} queries, "
        f"{len(corpus.edges)} edges to {cfg.corpus}"
    )
    return 0


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"ratios must look like 8:1:1, got {text!r}")
    try:
        r = tuple(float(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"ratios must be numeric: {text!r}") from exc
    if any(x < 0 for x in r) or sum(r) <= 0:
        raise UsageError(f"ratios must be nonnegative with positive sum: {text!r}")
    return r  # type: ignore[return-value]


def cmd_vocab(cfg: PipelineConfig, args) -> int:
    from .featurizer import build_vocab, save_vocab, tokenize

    corpus = _load_corpus(cfg, "vocab")
    fz = cfg.featurizer_config()
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    doc_tokens = [tokenize(d.text, fz.stopwords) for d in corpus.documents]
    query_tokens = [tokenize(q.text, fz.stopwords) for q in corpus.queries]
    paths = _vocab_paths(cfg)
    if cfg.separate_vocab:
        save_vocab(build_vocab(query_tokens, fz), fz, paths["query"])
        save_vocab(build_vocab(doc_tokens, fz), fz, paths["doc"])
    else:
        save_vocab(build_vocab(doc_tokens + query_tokens, fz), fz, paths["both"])
    for role, p in paths.items():
        print(f"vocab: wrote {p} ({role})")
    return 0


def cmd_featurize(cfg: PipelineConfig, args) -> int:
    from .featurizer import load_vocab, save_vectors, tfidf, tokenize

    corpus = _load_corpus(cfg, "featurize")
    fz = cfg.featurizer_config()
    paths = _vocab_paths(cfg)
    for p in paths.values():
        _require(p, "featurize", "vocab")
    if cfg.separate_vocab:
        query_vocab, _ = load_vocab(paths["query"])
        doc_vocab, _ = load_vocab(paths["doc"])
    else:
        query_vocab, _ = load_vocab(paths["both"])
        doc_vocab = query_vocab
    qvecs = {q.id: tfidf(tokenize(q.text, fz.stopwords), query_vocab, fz) for q in corpus.queries}
    dvecs = {d.id: tfidf(tokenize(d.text, fz.stopwords), doc_vocab, fz) for d in corpus.documents}
    save_vectors(qvecs, cfg.path("features.query.tsv"))
    save_vectors(dvecs, cfg.path("features.doc.tsv"))
    print(f"featurize: wrote {len(qvecs)} query and {len(dvecs)} doc vectors")
    return 0


def cmd_train(cfg: PipelineConfig, args) -> int:
    from .model import ModelError, save_checkpoint
    from .trainer import TrainError, fit

    corpus = _load_corpus(cfg, "train")
    features = _load_features(cfg, "train")
    try:
        train_cfg = cfg.train_config()
        result = fit(
            corpus,
            features,
            n_clusters=cfg.k,
            config=train_cfg,
            share_towers=cfg.share_towers,
            hidden_dim=cfg.hidden_dim,
            grade_filter=_grade_filter(cfg),
            log_path=cfg.path("training_log.jsonl"),
        )
    except (ModelError, TrainError) as exc:
        raise StageError(f"train: {exc}") from exc
    save_checkpoint(result.model, cfg.path("model.ckpt"), cfg.config_hash())
    last = result.log[-1] if result.log else None
    dev = f"{result.best_dev_cov1:.4f}" if result.best_dev_cov1 is not None else "n/a"
    epochs = last.epoch if last else 0
    print(f"train: {epochs} epochs, best dev Cov_1 {dev}, checkpoint {cfg.path('model.ckpt')}")
    return 0


def _load_model(cfg: PipelineConfig, stage: str):
    from .model import load_checkpoint

    path = _require(cfg.path("model.ckpt"), stage, "train")
    model, _ = load_checkpoint(path)
    return model


def cmd_shard(cfg: PipelineConfig, args) -> int:
    from .selective_search import assign_documents, save_shard_map

    model = _load_model(cfg, "shard")
    features = _load_features(cfg, "shard")
    shard_map = assign_documents(model, features.doc_vectors)
    save_shard_map(shard_map, cfg.path("shardmap.tsv"))
    sizes = shard_map.shard_sizes
    print(
        f"shard: {shard_map.n_documents} docs over {shard_map.n_clusters} shards "
        f"(min {int(sizes.min())}, max {int(sizes.max())})"
    )
    return 0


def cmd_route(cfg: PipelineConfig, args) -> int:
    from .selective_search import route_query, save_routings

    if args.top is not None and args.top < 1:
        raise UsageError(f"--top must be >= 1, got {args.top}")
    model = _load_model(cfg, "route")
    features = _load_features(cfg, "route")
    corpus = _load_corpus(cfg, "route")
    top = args.top if args.top is not None else model.n_clusters
    if top > model.n_clusters:
        raise UsageError(f"--top {top} exceeds shard count {model.n_clusters}")
    qids = corpus.query_ids_in_split(args.split) if corpus.split else [q.id for q in corpus.queries]
    routings = [route_query(model, features.query_vectors[qid], top, qid) for qid in qids]
    save_routings(routings, cfg.path("routing.tsv"))
    print(f"route: wrote top-{top} routings for {len(routings)} {args.split} queries")
    return 0


def _print_table(label: str, agg_or_report, eval_ns: list[int]) -> None:
    from .evaluation import EvalReport, format_percent

    cols = "  ".join(f"N={n}" for n in eval_ns)
    print(f"eval[{label}]  coverage%  ({cols})")
    if isinstance(agg_or_report, EvalReport):
        row = "  ".join(format_percent(agg_or_report.coverage[n]) for n in eval_ns)
    else:
        row = "  ".join(
            format_percent(*agg_or_report.coverage[n]) for n in eval_ns
        )
    print(f"  {row}")


def cmd_eval(cfg: PipelineConfig, args) -> int:
    from .baselines import (
        balanced_kmeans_shard,
        centroid_shard_map,
        kmeans_shard,
        random_shard,
        route_query_centroids,
    )
    from .evaluation import aggregate_runs, evaluate, save_report
    from .selective_search import load_shard_map

    corpus = _load_corpus(cfg, "eval")
    relevance = corpus.relevant_docs(grade_filter=_grade_filter(cfg), split=args.split)
    qids = sorted(relevance)
    if not qids:
        raise StageError(f"eval: no {args.split} queries to evaluate")

    method = args.method
    reports = []
    if method == "mico":
        model = _load_model(cfg, "eval")
        features = _load_features(cfg, "eval")
        shard_path = cfg.path("shardmap.tsv")
        if shard_path.exists():
            shard_map = load_shard_map(shard_path, model.n_clusters)
        else:
            from .selective_search import assign_documents

            shard_map = assign_documents(model, features.doc_vectors)
        routings = _full_routings(model, features, qids)
        reports.append(evaluate(shard_map, routings, relevance, cfg.eval_ns, run_seed=cfg.seed))
    elif method == "random":
        doc_ids = [d.id for d in corpus.documents]
        for seed in cfg.runs:
            shard_map, router = random_shard(doc_ids, cfg.k, seed)
            routings = {qid: router.route(qid) for qid in qids}
            reports.append(evaluate(shard_map, routings, relevance, cfg.eval_ns, run_seed=seed))
    elif method in ("kmeans", "balanced-kmeans"):
        features = _load_features(cfg, "eval")
        if features.query_dim != features.doc_dim:
            raise StageError("eval: centroid baselines need a unified vocabulary")
        cluster = kmeans_shard if method == "kmeans" else balanced_kmeans_shard
        train_q = set(corpus.query_ids_in_split("train"))
        points = dict(features.doc_vectors)
        points.update({qid: features.query_vectors[qid] for qid in train_q})
        doc_ids = [d.id for d in corpus.documents]
        for seed in cfg.runs:
            cm = cluster(points, features.doc_dim, cfg.k, seed)
            shard_map = centroid_shard_map(cm, doc_ids)
            routings = {
                qid: route_query_centroids(cm, features.query_vectors[qid], features.doc_dim,
                                           query_id=qid)
                for qid in qids
            }
            reports.append(evaluate(shard_map, routings, relevance, cfg.eval_ns, run_seed=seed))
    else:
        raise UsageError(f"unknown eval method {method!r}")

    cfg.workdir.mkdir(parents=True, exist_ok=True)
    if len(reports) == 1:
        save_report(reports[0], cfg.path("report.json"))
        _print_table(method, reports[0], cfg.eval_ns)
    else:
        agg = aggregate_runs(reports)
        _save_multi_report(reports, agg, cfg.path("report.json"))
        _print_table(f"{method}, {len(reports)} runs", agg, cfg.eval_ns)
    print(f"eval: wrote {cfg.path('report.json')}")
    return 0


def _save_multi_report(reports, agg, path: Path) -> None:
    from .evaluation import report_to_json

    payload = {
        "aggregate": {
            "coverage": {str(n): list(v) for n, v in agg.coverage.items()},
            "cost_resource": {str(n): list(v) for n, v in agg.cost_resource.items()},
            "cost_latency": {str(n): list(v) for n, v in agg.cost_latency.items()},
            "n_runs": agg.n_runs,
        },
        "runs": [json.loads(report_to_json(r)) for r in reports],
    }
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def cmd_baseline(cfg: PipelineConfig, args) -> int:
    from .baselines import (
        balanced_kmeans_shard,
        centroid_shard_map,
        kmeans_shard,
        random_shard,
        route_query_centroids,
    )
    from .selective_search import save_routings, save_shard_map

    corpus = _load_corpus(cfg, "baseline")
    doc_ids = [d.id for d in corpus.documents]
    qids = corpus.query_ids_in_split(args.split) if corpus.split else [q.id for q in corpus.queries]
    if args.method == "random":
        shard_map, router = random_shard(doc_ids, cfg.k, cfg.seed)
        routings = [router.route(qid) for qid in qids]
    elif args.method in ("kmeans", "balanced-kmeans"):
        features = _load_features(cfg, "baseline")
        if features.query_dim != features.doc_dim:
            raise StageError("baseline: centroid baselines need a unified vocabulary")
        cluster = kmeans_shard if args.method == "kmeans" else balanced_kmeans_shard
        train_q = set(corpus.query_ids_in_split("train"))
        points = dict(features.doc_vectors)
        points.update({qid: features.query_vectors[qid] for qid in train_q})
        cm = cluster(points, features.doc_dim, cfg.k, cfg.seed)
        shard_map = centroid_shard_map(cm, doc_ids)
        routings = [
            route_query_centroids(cm, features.query_vectors[qid], features.doc_dim, query_id=qid)
            for qid in qids
        ]
    else:
        raise UsageError(f"unknown baseline method {args.method!r}")
    save_shard_map(shard_map, cfg.path("shardmap.tsv"))
    save_routings(routings, cfg.path("routing.tsv"))
    print(f"baseline[{args.method}]: wrote shardmap.tsv and routing.tsv")
    return 0


def cmd_report(cfg: PipelineConfig, args) -> int:
    from .evaluation import write_plotdata

    paths = [Path(p) for p in args.reports]
    labels = args.labels.split(",") if args.labels else [p.stem for p in paths]
    if len(labels) != len(paths):
        raise UsageError(f"{len(paths)} reports but {len(labels)} labels")
    rows = []
    for label, path in zip(labels, paths):
        _require(path, "report", "eval")
        payload = json.loads(path.read_text(encoding="utf-8"))
        if "aggregate" in payload:
            agg = payload["aggregate"]
            for n in sorted(agg["coverage"], key=int):
                cov_m, cov_s = agg["coverage"][n]
                rows.append(
                    (label, int(n), 100 * cov_m, 100 * cov_s,
                     agg["cost_resource"][n][0], agg["cost_latency"][n][0])
                )
        else:
            for n in sorted(payload["coverage"], key=int):
                rows.append(
                    (label, int(n), 100 * payload["coverage"][n], 0.0,
                     payload["cost_resource"][n], payload["cost_latency"][n])
                )
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    write_plotdata(rows, cfg.path("plotdata.csv"))
    print(f"report: wrote {cfg.path('plotdata.csv')} ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints: {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="micosearch",
        description="Co-trained document sharding and query routing for selective search.",
    )
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--workdir", help="artifact directory (default: run)")
    parser.add_argument("--corpus-dir", help="corpus directory (default: WORKDIR/corpus)")
    parser.add_argument("--k", type=int, help="number of shards")
    parser.add_argument("--seed", type=int, help="seed for the command at hand")
    parser.add_argument("--eval-ns", type=_int_list, help="comma-separated N values")
    parser.add_argument("--runs", type=_int_list, help="comma-separated run seeds")
    parser.add_argument("--grades", help="comma-separated relevance grades to use")
    parser.add_argument("--vocab-size", type=int)
    parser.add_argument("--separate-vocab", action="store_true", default=None)
    parser.add_argument("--stopwords-file")
    parser.add_argument("--variant", choices=["mico", "mico-q", "mico_q"])
    parser.add_argument("--beta", type=float)
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--max-epochs", type=int)
    parser.add_argument("--patience", type=int)
    parser.add_argument("--theta-steps", type=int)
    parser.add_argument("--clip-norm", type=float)
    parser.add_argument("--lr-towers", type=float)
    parser.add_argument("--lr-theta", type=float)
    parser.add_argument("--share-towers", action="store_true", default=None)
    parser.add_argument("--hidden-dim", type=int)

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-group synthetic corpus")
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--docs-per-group", type=int, default=500)
    p.add_argument("--queries-per-group", type=int, default=200)
    p.add_argument("--vocab-per-group", type=int, default=50)
    p.add_argument("--shared-vocab", type=int, default=10)
    p.add_argument("--tokens-per-doc", type=int, default=60)
    p.add_argument("--tokens-per-query", type=int, default=16)
    p.add_argument("--edges-per-query", type=int, default=5)
    p.add_argument("--noise-rate", type=float, default=0.05)
    p.add_argument("--vocab-overlap", type=float, default=0.0)
    p.add_argument("--ratios", default="8:1:1", help="train:dev:test query ratios")
    p.set_defaults(func=cmd_synth)

    sub.add_parser("vocab", help="build the vocabulary").set_defaults(func=cmd_vocab)
    sub.add_parser("featurize", help="write TF-IDF vectors").set_defaults(func=cmd_featurize)
    sub.add_parser("train", help="train the sharding/routing model").set_defaults(func=cmd_train)
    sub.add_parser("shard", help="assign documents to shards").set_defaults(func=cmd_shard)

    p = sub.add_parser("route", help="route split queries to top shards")
    p.add_argument("--top", type=int, help="number of shards per query (default: all)")
    p.add_argument("--split", default="test", choices=["train", "dev", "test"])
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("eval", help="evaluate coverage and costs")
    p.add_argument("--method", default="mico",
                   choices=["mico", "random", "kmeans", "balanced-kmeans"])
    p.add_argument("--split", default="test", choices=["train", "dev", "test"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="write baseline shardmap and routing artifacts")
    p.add_argument("--method", required=True, choices=["random", "kmeans", "balanced-kmeans"])
    p.add_argument("--split", default="test", choices=["train", "dev", "test"])
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("report", help="combine eval reports into plotdata.csv")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--labels", help="comma-separated method labels")
    p.set_defaults(func=cmd_report)
    return parser


_OVERRIDE_KEYS = [
    "workdir", "corpus_dir", "k", "seed", "eval_ns", "runs", "vocab_size",
    "separate_vocab", "stopwords_file", "variant", "beta", "gamma", "batch_size",
    "max_epochs", "patience", "theta_steps", "clip_norm", "lr_towers", "lr_theta",
    "share_towers", "hidden_dim",
]


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)

    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {k: getattr(args, k, None) for k in _OVERRIDE_KEYS}
    if args.grades is not None:
        overrides["grades"] = [g for g in args.grades.split(",") if g]
    try:
        cfg = load_pipeline_config(args.config, overrides)
        return args.func(cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures from the pipeline modules
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
