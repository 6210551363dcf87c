"""Training records in the three canonical formats, JSONL ingestion,
instruction prefixes, hard-negative self-mining and the staged mixture."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DataError

log = logging.getLogger(__name__)

RETRIEVAL = "retrieval"
CLUSTERING = "clustering"
CLASSIFICATION = "classification"
FORMATS = (RETRIEVAL, CLUSTERING, CLASSIFICATION)

INSTRUCTION_TEMPLATE = "Instruct: {instruction}\nQuery: {query}"
DEFAULT_SOURCE_CAP = 100_000


@dataclass(frozen=True)
class Sample:
    query: str
    positive: str
    hard_negatives: tuple[str, ...] = ()
    format: str = RETRIEVAL
    instruction: str | None = None
    source: str = ""
    line: int | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "hard_negatives", tuple(self.hard_negatives))
        if not self.positive:
            raise DataError("positive must be non-empty", self.line)
        if self.format not in FORMATS:
            raise DataError(f"unknown format tag {self.format!r}", self.line)
        if self.format == CLASSIFICATION and len(self.hard_negatives) != 1:
            raise DataError("classification samples need exactly one hard negative", self.line)

    def to_dict(self) -> dict:
        d = {
            "query": self.query,
            "positive": self.positive,
            "hard_negatives": list(self.hard_negatives),
            "format": self.format,
            "source": self.source,
        }
        if self.instruction is not None:
            d["instruction"] = self.instruction
        return d


def _record_to_sample(rec, line: int, default_source: str) -> Sample:
    if not isinstance(rec, dict):
        raise DataError("record is not a JSON object", line)
    for key in ("query", "positive", "format"):
        if key not in rec:
            raise DataError(f"missing field {key!r}", line)
    negs = rec.get("hard_negatives", [])
    if not isinstance(negs, list) or not all(isinstance(n, str) for n in negs):
        raise DataError("hard_negatives must be a list of strings", line)
    if not isinstance(rec["query"], str) or not isinstance(rec["positive"], str):
        raise DataError("query and positive must be strings", line)
    return Sample(
        query=rec["query"],
        positive=rec["positive"],
        hard_negatives=tuple(negs),
        format=rec["format"],
        instruction=rec.get("instruction"),
        source=rec.get("source") or default_source,
        line=line,
    )


def load_jsonl(path) -> Iterator[Sample]:
    """Stream samples in file order; unknown extra fields are ignored."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DataError(f"malformed JSON ({exc.msg})", lineno) from None
            yield _record_to_sample(rec, lineno, path.stem)


def write_jsonl(samples: Iterable[Sample], path):
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), ensure_ascii=False) + "\n")


def canonicalize_clustering(
    anchor_index: int,
    class_id,
    class_pool: Mapping[object, Sequence[str]],
    rng: np.random.Generator,
    source: str = "",
) -> Sample | None:
    """Anchor, a classmate as positive, a member of another class as negative.

    Returns None when the anchor's class is a singleton or only one class exists.
    """
    members = class_pool[class_id]
    others = [c for c in class_pool if c != class_id and len(class_pool[c]) > 0]
    if len(members) < 2 or not others:
        return None
    choices = [i for i in range(len(members)) if i != anchor_index]
    positive = members[choices[int(rng.integers(len(choices)))]]
    neg_class = others[int(rng.integers(len(others)))]
    neg_members = class_pool[neg_class]
    negative = neg_members[int(rng.integers(len(neg_members)))]
    return Sample(members[anchor_index], positive, (negative,), CLUSTERING, source=source)


def build_clustering_samples(class_pool: Mapping[object, Sequence[str]], seed: int = 0, source=""):
    """Every member of every class as anchor; returns (samples, skipped count)."""
    rng = np.random.default_rng(seed)
    samples, skipped = [], 0
    for cid, members in class_pool.items():
        for i in range(len(members)):
            s = canonicalize_clustering(i, cid, class_pool, rng, source)
            if s is None:
                skipped += 1
            else:
                samples.append(s)
    if skipped:
        log.warning("skipped %d clustering anchors from singleton classes", skipped)
    return samples, skipped


def canonicalize_classification(text: str, label: int, label_texts: Sequence[str], source="") -> Sample:
    """Two-way classification: own label text positive, the other one negative."""
    if len(label_texts) != 2 or label not in (0, 1):
        raise DataError("two-way classification needs two label texts and label 0/1")
    return Sample(text, label_texts[label], (label_texts[1 - label],), CLASSIFICATION, source=source)


def apply_instruction(sample: Sample, template: str = INSTRUCTION_TEMPLATE) -> Sample:
    """Prefix the query with its instruction; documents are never touched."""
    if not sample.instruction:
        return sample
    prefix = template.format(instruction=sample.instruction, query="")
    if sample.query.startswith(prefix):
        return sample
    return replace(sample, query=template.format(instruction=sample.instruction, query=sample.query))


def rank_by_similarity(sims: np.ndarray) -> np.ndarray:
    """Indices by descending similarity, ties broken by ascending index."""
    return np.argsort(-np.asarray(sims), kind="stable")


def top_k_excluding(sims: np.ndarray, exclude: Iterable[int], k: int) -> list[int]:
    banned = set(exclude)
    out = []
    for i in rank_by_similarity(sims):
        if int(i) in banned:
            continue
        out.append(int(i))
        if len(out) == k:
            break
    return out


def mine_hard_negatives(weights, corpus: Sequence[str], queries: Sequence[str], positives: Sequence[str], k: int):
    """Top-``k`` corpus documents by cosine to each query, gold excluded.

    Embeds with the model at full depth, width and rank. Returns one list of
    document texts per query.
    """
    from .model import embed

    corpus = list(corpus)
    index: dict[str, list[int]] = {}
    for i, doc in enumerate(corpus):
        index.setdefault(doc, []).append(i)
    for p in positives:
        if p not in index:
            raise DataError(f"positive not found in corpus: {p[:40]!r}")
    if k > len(corpus) - 1:
        log.warning("corpus of %d documents too small for k=%d; shrinking", len(corpus), k)
        k = max(len(corpus) - 1, 0)
    if k == 0 or not queries:
        return [[] for _ in queries]
    doc_vecs = embed(weights, corpus).astype(np.float64)
    query_vecs = embed(weights, list(queries)).astype(np.float64)
    sims = query_vecs @ doc_vecs.T
    return [
        [corpus[j] for j in top_k_excluding(sims[qi], index[positives[qi]], k)]
        for qi in range(len(queries))
    ]


@dataclass(frozen=True)
class MixtureSpec:
    stage: int = 1
    cap: int = DEFAULT_SOURCE_CAP
    sources: tuple[str, ...] = ()
    weights: Mapping[str, float] | None = field(default=None, compare=False)
    seed: int = 0
    instruction_template: str = INSTRUCTION_TEMPLATE

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigurationError(f"stage must be 1 or 2, got {self.stage}")
        if self.cap < 1:
            raise ConfigurationError("cap must be positive")
        object.__setattr__(self, "sources", tuple(self.sources))


def mixture_iterator(spec: MixtureSpec, sources: Mapping[str, Sequence[Sample]]) -> Iterator[Sample]:
    """Cap each source, shuffle globally; stage 2 applies instructions."""
    names = spec.sources or tuple(sources)
    rng = np.random.default_rng(spec.seed)
    pool: list[Sample] = []
    for name in names:
        if name not in sources:
            raise ConfigurationError(f"source {name!r} is not registered")
        items = list(sources[name])
        if spec.stage == 1:
            bad = {s.format for s in items} - {RETRIEVAL}
            if bad:
                raise ConfigurationError(
                    f"stage 1 takes retrieval sources only; {name!r} has {sorted(bad)}"
                )
        weight = 1.0 if spec.weights is None else spec.weights.get(name, 1.0)
        cap = max(1, int(round(spec.cap * weight)))
        if len(items) > cap:
            keep = np.sort(rng.choice(len(items), size=cap, replace=False))
            items = [items[i] for i in keep]
        pool.extend(items)
    order = rng.permutation(len(pool))
    for i in order:
        s = pool[i]
        yield apply_instruction(s, spec.instruction_template) if spec.stage == 2 else s


def iter_batches(stream: Iterable[Sample], batch_size: int, n_hard: int | None = None,
                 drop_last: bool = False) -> Iterator[list[Sample]]:
    """Group a sample stream into format-homogeneous batches.

    Hard negatives are trimmed to ``n_hard`` (retrieval/clustering) so that
    every batch has a uniform negative count; classification keeps its one.
    """
    buckets: dict[tuple[str, int], list[Sample]] = {}
    for s in stream:
        if n_hard is not None and s.format != CLASSIFICATION and len(s.hard_negatives) > n_hard:
            s = replace(s, hard_negatives=s.hard_negatives[:n_hard])
        key = (s.format, len(s.hard_negatives))
        bucket = buckets.setdefault(key, [])
        bucket.append(s)
        if len(bucket) == batch_size:
            yield bucket
            buckets[key] = []
    if not drop_last:
        for bucket in buckets.values():
            if bucket:
                yield bucket
