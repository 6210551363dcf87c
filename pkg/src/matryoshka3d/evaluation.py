"""Retrieval/classification/STS metrics, synthetic tasks and the
(depth, dim, rank) sweep."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import RETRIEVAL, Sample, rank_by_similarity
from .deploy import dense_table
from .errors import DataError, NumericalError, ParameterError, UsageError
from .linalg import truncated_svd
from .model import FactorizedEmbedding, ModelWeights, encode_texts, forward_taps

log = logging.getLogger(__name__)

REPORT_FORMAT = "m3d-eval-report"
REPORT_VERSION = 1


# metrics


def ndcg_at_k(ranked: Sequence[int], relevance: Mapping[int, float], k: int = 10) -> float:
    """NDCG over the top ``k`` of ``ranked`` with gain = relevance.

    Returns 0.0 when nothing is relevant (see :func:`has_relevant`).
    """
    if k < 1:
        raise ParameterError("k must be >= 1")
    gains = sorted((g for g in relevance.values() if g > 0), reverse=True)
    if not gains:
        return 0.0
    dcg = sum(relevance.get(int(doc), 0.0) / np.log2(pos + 2) for pos, doc in enumerate(ranked[:k]))
    idcg = sum(g / np.log2(pos + 2) for pos, g in enumerate(gains[:k]))
    return float(dcg / idcg)


def has_relevant(relevance: Mapping[int, float]) -> bool:
    return any(g > 0 for g in relevance.values())


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ParameterError("spearman needs two equal-length 1-D inputs of length >= 2")
    rx, ry = _average_ranks(x), _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx @ rx) * (ry @ ry))
    if denom == 0:
        raise NumericalError("spearman is undefined for constant input")
    return float(np.clip((rx @ ry) / denom, -1.0, 1.0))


def accuracy(pred, gold) -> float:
    pred, gold = np.asarray(pred), np.asarray(gold)
    return float((pred == gold).mean()) if len(gold) else 0.0


# embedding access shared by plain evaluation and sweeps


def embed_taps(weights: ModelWeights, texts: Sequence[str], depths: Sequence[int], rank=None,
               batch_size: int = 256) -> dict[int, np.ndarray]:
    """Raw (un-normalized) taps for several depths in one forward per chunk."""
    depths = sorted(set(depths))
    if depths[-1] > weights.config.n_layers:
        raise UsageError(f"depth {depths[-1]} not available in a {weights.config.n_layers}-layer model")
    seqs = encode_texts(list(texts), weights.config)
    out = {d: [] for d in depths}
    for start in range(0, len(seqs), batch_size):
        taps = forward_taps(weights, seqs[start : start + batch_size], rank, depths)
        for d in depths:
            out[d].append(taps[d].data)
    return {d: np.concatenate(v, axis=0) for d, v in out.items()}


def normalize_prefix(taps: np.ndarray, dim: int) -> np.ndarray:
    return T.l2_normalize(T.Tensor(taps[:, :dim])).data


def classify_by_label_similarity(weights: ModelWeights, texts, label_texts: Sequence[str],
                                 depth=None, dim=None, rank=None):
    """Index of the most cosine-similar label text; ties go to the lowest index.

    ``texts`` may be a single string (returns an int) or a list.
    """
    if len(label_texts) < 2:
        raise ParameterError("need at least two label texts")
    single = isinstance(texts, str)
    texts = [texts] if single else list(texts)
    depth = depth or weights.config.n_layers
    dim = dim or weights.config.d_model
    taps = embed_taps(weights, texts + list(label_texts), [depth], rank)[depth]
    vecs = normalize_prefix(taps, dim).astype(np.float64)
    sims = vecs[: len(texts)] @ vecs[len(texts) :].T
    pred = [int(rank_by_similarity(row)[0]) for row in sims]
    return pred[0] if single else pred


# tasks


@dataclass
class RetrievalTask:
    """Queries with one gold document each, by index into ``corpus``."""

    name: str
    corpus: list[str]
    queries: list[str]
    gold: list[int]

    def __post_init__(self):
        if len(self.queries) != len(self.gold):
            raise DataError("queries and gold labels differ in length")
        if any(not 0 <= g < len(self.corpus) for g in self.gold):
            raise DataError("gold document outside the corpus")


def task_from_samples(samples: Sequence[Sample], name: str = "retrieval") -> RetrievalTask:
    """Corpus = every positive and hard negative (deduplicated, first-seen order)."""
    index: dict[str, int] = {}
    for s in samples:
        for doc in (s.positive, *s.hard_negatives):
            index.setdefault(doc, len(index))
    return RetrievalTask(name, list(index), [s.query for s in samples], [index[s.positive] for s in samples])


@dataclass(frozen=True)
class SynthTaskSpec:
    n_clusters: int = 8
    docs_per_cluster: int = 16
    words_per_cluster: int = 32
    doc_len: int = 8
    query_len: int = 4
    noise_rate: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 2 or self.docs_per_cluster < 2:
            raise ParameterError("need >= 2 clusters with >= 2 documents each")
        if not 1 <= self.query_len <= self.doc_len <= self.words_per_cluster:
            raise ParameterError("need 1 <= query_len <= doc_len <= words_per_cluster")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ParameterError("noise_rate must lie in [0, 1]")


@dataclass
class SynthTask:
    """Cluster-structured corpus with one gold document per query."""

    spec: SynthTaskSpec
    corpus: list[str]
    doc_cluster: list[int]
    doc_words: list[tuple[str, ...]]
    cluster_words: list[tuple[str, ...]]
    queries: list[str]
    gold: list[int]
    name: str = "synth-retrieval"

    def make_query(self, doc: int, rng: np.random.Generator) -> str:
        s = self.spec
        words = list(rng.choice(self.doc_words[doc], size=s.query_len, replace=False))
        vocab = self.cluster_words[self.doc_cluster[doc]]
        for i in range(len(words)):
            if rng.random() < s.noise_rate:
                words[i] = vocab[int(rng.integers(len(vocab)))]
        return " ".join(words)

    def training_samples(self, seed: int = 1, n_hard: int = 7) -> Iterator[Sample]:
        """Endless retrieval samples; hard negatives come from the gold doc's cluster."""
        rng = np.random.default_rng([self.spec.seed, seed])
        n_docs = len(self.corpus)
        members: dict[int, list[int]] = {}
        for i, c in enumerate(self.doc_cluster):
            members.setdefault(c, []).append(i)
        while True:
            doc = int(rng.integers(n_docs))
            pool = [j for j in members[self.doc_cluster[doc]] if j != doc]
            if len(pool) < n_hard:
                pool += [j for j in range(n_docs) if self.doc_cluster[j] != self.doc_cluster[doc]]
            negs = rng.choice(pool, size=n_hard, replace=False) if n_hard else []
            yield Sample(
                self.make_query(doc, rng),
                self.corpus[doc],
                tuple(self.corpus[int(j)] for j in negs),
                RETRIEVAL,
                source=self.name,
            )

    def label_texts(self, n_words: int = 4) -> list[str]:
        return [" ".join(words[:n_words]) for words in self.cluster_words]

    def sts_pairs(self, n_pairs: int = 200, seed: int = 2):
        """Document pairs scored by word-set Jaccard overlap."""
        rng = np.random.default_rng([self.spec.seed, seed])
        n = len(self.corpus)
        pairs, scores = [], []
        for _ in range(n_pairs):
            a = int(rng.integers(n))
            if rng.random() < 0.5:
                same = [j for j in range(n) if self.doc_cluster[j] == self.doc_cluster[a] and j != a]
                b = same[int(rng.integers(len(same)))]
            else:
                b = int(rng.integers(n))
            wa, wb = set(self.doc_words[a]), set(self.doc_words[b])
            pairs.append((self.corpus[a], self.corpus[b]))
            scores.append(len(wa & wb) / len(wa | wb))
        return pairs, scores


def generate_synthetic_task(spec: SynthTaskSpec, n_queries_per_doc: int = 1) -> SynthTask:
    """Pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    cluster_words = [
        tuple(f"c{c}w{j}" for j in range(spec.words_per_cluster)) for c in range(spec.n_clusters)
    ]
    corpus, doc_cluster, doc_words = [], [], []
    for c in range(spec.n_clusters):
        for _ in range(spec.docs_per_cluster):
            words = tuple(rng.choice(cluster_words[c], size=spec.doc_len, replace=False))
            corpus.append(" ".join(words))
            doc_cluster.append(c)
            doc_words.append(words)
    task = SynthTask(spec, corpus, doc_cluster, doc_words, cluster_words, [], [])
    qrng = np.random.default_rng([spec.seed, 1_000_003])
    for doc in range(len(corpus)):
        for _ in range(n_queries_per_doc):
            task.queries.append(task.make_query(doc, qrng))
            task.gold.append(doc)
    return task


def retrieval_ndcg(query_vecs: np.ndarray, doc_vecs: np.ndarray, gold: Sequence[int], k: int = 10) -> float:
    sims = query_vecs.astype(np.float64) @ doc_vecs.astype(np.float64).T
    scores = [ndcg_at_k(rank_by_similarity(row)[:k], {int(g): 1.0}, k) for row, g in zip(sims, gold)]
    return float(np.mean(scores))


def evaluate_retrieval(weights: ModelWeights, task: SynthTask, depth=None, dim=None, rank=None,
                       k: int = 10) -> float:
    """Mean NDCG@k of the task's queries against its corpus."""
    depth = depth or weights.config.n_layers
    dim = dim or weights.config.d_model
    q = normalize_prefix(embed_taps(weights, task.queries, [depth], rank)[depth], dim)
    d = normalize_prefix(embed_taps(weights, task.corpus, [depth], rank)[depth], dim)
    return retrieval_ndcg(q, d, task.gold, k)


# sweep


@dataclass
class EvalReport:
    entries: dict[tuple[int, int, int], dict[str, float]] = field(default_factory=dict)
    corpus_sizes: dict[str, int] = field(default_factory=dict)
    wall_clock: float = 0.0
    native_rank: int | None = None
    rank_mode: str = "svd"

    def value(self, depth: int, dim: int, rank: int, task: str | None = None) -> float:
        metrics = self.entries[(depth, dim, rank)]
        return metrics[task] if task else next(iter(metrics.values()))

    def to_table(self) -> str:
        tasks = sorted({t for m in self.entries.values() for t in m})
        lines = ["depth\tdim\trank\t" + "\t".join(tasks)]
        for key in sorted(self.entries):
            vals = "\t".join(f"{self.entries[key].get(t, float('nan')):.4f}" for t in tasks)
            lines.append(f"{key[0]}\t{key[1]}\t{key[2]}\t{vals}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "format_version": REPORT_VERSION,
            "native_rank": self.native_rank,
            "rank_mode": self.rank_mode,
            "corpus_sizes": self.corpus_sizes,
            "wall_clock_seconds": self.wall_clock,
            "entries": [
                {"depth": k[0], "dim": k[1], "rank": k[2], "metrics": v}
                for k, v in sorted(self.entries.items())
            ],
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        if d.get("format") != REPORT_FORMAT:
            raise UsageError(f"{path} is not an eval report")
        rep = cls(native_rank=d.get("native_rank"), rank_mode=d.get("rank_mode", "svd"))
        rep.corpus_sizes = d.get("corpus_sizes", {})
        rep.wall_clock = d.get("wall_clock_seconds", 0.0)
        for e in d["entries"]:
            rep.entries[(e["depth"], e["dim"], e["rank"])] = e["metrics"]
        return rep


def native_rank(weights: ModelWeights) -> int:
    return weights.embedding.rank


def rank_variants(weights: ModelWeights, ranks: Sequence[int], mode: str = "svd"):
    """Yield ``(rank, weights variant, forward rank argument)`` per requested rank.

    ``svd`` re-factorizes the dense (compatibility) table once and truncates;
    ``columns`` truncates the trained factors directly (factorized models only).
    The native rank always maps to the model itself.
    """
    native = native_rank(weights)
    svd = None
    for r in ranks:
        if r == native:
            yield r, weights, None
            continue
        if not 1 <= r <= min(weights.config.vocab_size, weights.config.d_model):
            raise ParameterError(f"rank {r} out of range")
        if mode == "columns":
            if not isinstance(weights.embedding, FactorizedEmbedding) or r > native:
                raise UsageError("column truncation needs a factorized model and rank <= its rank")
            yield r, weights, r
            continue
        if mode != "svd":
            raise UsageError(f"unknown rank mode {mode!r}")
        if svd is None:
            table = dense_table(weights).data
            svd = truncated_svd(table, min(table.shape))
        A = (svd.U.data[:, :r] * svd.S.data[None, :r]).astype(weights.dtype)
        B = svd.Vt.data[:r].astype(weights.dtype)
        variant = ModelWeights(
            weights.config.with_rank(r),
            FactorizedEmbedding(T.Tensor(A), T.Tensor(B)),
            weights.layers,
            weights.final_norm,
        )
        yield r, variant, None


def run_sweep(
    weights: ModelWeights,
    tasks: Sequence[SynthTask],
    depths: Sequence[int] | None = None,
    dims: Sequence[int] | None = None,
    ranks: Sequence[int] | None = None,
    rank_mode: str = "svd",
    k: int = 10,
) -> EvalReport:
    """One NDCG@k value per task for every (depth, dim, rank) combination."""
    cfg = weights.config
    depths = list(depths or cfg.mll_layers)
    dims = list(dims or cfg.mrl_dims)
    ranks = list(ranks or [native_rank(weights)])
    for d in depths:
        if not 1 <= d <= cfg.n_layers:
            raise UsageError(f"depth {d} outside [1, {cfg.n_layers}]")
    for d in dims:
        if not 1 <= d <= cfg.d_model:
            raise UsageError(f"dim {d} outside [1, {cfg.d_model}]")
    t0 = time.perf_counter()
    report = EvalReport(native_rank=native_rank(weights), rank_mode=rank_mode)
    for task in tasks:
        report.corpus_sizes[task.name] = len(task.corpus)
    for r, variant, fwd_rank in rank_variants(weights, ranks, rank_mode):
        for task in tasks:
            q_taps = embed_taps(variant, task.queries, depths, fwd_rank)
            d_taps = embed_taps(variant, task.corpus, depths, fwd_rank)
            for depth, dim in product(depths, dims):
                q = normalize_prefix(q_taps[depth], dim)
                d = normalize_prefix(d_taps[depth], dim)
                report.entries.setdefault((depth, dim, r), {})[task.name] = retrieval_ndcg(q, d, task.gold, k)
    report.wall_clock = time.perf_counter() - t0
    return report


__all__ = [
    "EvalReport",
    "RetrievalTask",
    "SynthTask",
    "SynthTaskSpec",
    "accuracy",
    "classify_by_label_similarity",
    "evaluate_retrieval",
    "generate_synthetic_task",
    "ndcg_at_k",
    "run_sweep",
    "spearman",
    "task_from_samples",
]
