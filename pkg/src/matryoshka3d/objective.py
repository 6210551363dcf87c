"""Contrastive loss, the layer x dimension weighted objective, and the
sub-rank sampler."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, ParameterError, UsageError
from .tensor import Tensor

DEFAULT_TEMPERATURE = 0.5
DEFAULT_HARD_NEGATIVES = 7
CLASSIFICATION_HARD_NEGATIVES = 1


def loss_weight(layer: int, dim: int, d_model: int) -> float:
    """``1 / sqrt(d_model / dim)``; the same for every layer."""
    if not 1 <= dim <= d_model:
        raise ParameterError(f"dim {dim} outside [1, {d_model}]")
    return 1.0 / np.sqrt(d_model / dim)


@dataclass(frozen=True)
class LossConfig:
    mll_layers: tuple[int, ...]
    mrl_dims: tuple[int, ...]
    d_model: int
    temperature: float = DEFAULT_TEMPERATURE
    n_hard_negatives: int = DEFAULT_HARD_NEGATIVES
    coefficients: Mapping[tuple[int, int], float] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ParameterError("temperature must be positive")
        if self.n_hard_negatives < 0:
            raise ParameterError("n_hard_negatives must be >= 0")
        object.__setattr__(self, "mll_layers", tuple(self.mll_layers))
        object.__setattr__(self, "mrl_dims", tuple(self.mrl_dims))

    @classmethod
    def for_model(cls, config, **overrides) -> "LossConfig":
        return cls(config.mll_layers, config.mrl_dims, config.d_model, **overrides)

    def weight(self, layer: int, dim: int) -> float:
        if self.coefficients is not None:
            return self.coefficients[(layer, dim)]
        return loss_weight(layer, dim, self.d_model)


def info_nce(
    q: Tensor,
    pos: Tensor,
    negs: Tensor | None = None,
    temperature: float = DEFAULT_TEMPERATURE,
    in_batch: bool = False,
) -> Tensor:
    """Batch-mean contrastive loss with cosine similarity.

    ``q`` and ``pos`` are ``B x d``; ``negs`` is ``B x n x d`` (n may be 0).
    With ``in_batch`` every other row of ``pos`` is an extra negative.
    """
    if temperature <= 0:
        raise ParameterError("temperature must be positive")
    if q.shape != pos.shape or q.ndim != 2:
        raise DimensionError(f"query/positive shapes differ: {q.shape} vs {pos.shape}")
    b, d = q.shape
    qn = T.l2_normalize(q)
    pn = T.l2_normalize(pos)
    columns = [(qn * pn).sum(axis=-1).reshape(b, 1)]
    if negs is not None and negs.shape[1] > 0:
        if negs.ndim != 3 or negs.shape[0] != b or negs.shape[2] != d:
            raise DimensionError(f"negatives must be {b} x n x {d}, got {negs.shape}")
        nn = T.l2_normalize(negs)
        columns.append((nn @ qn.reshape(b, d, 1)).reshape(b, negs.shape[1]))
    if in_batch and b > 1:
        rows = np.repeat(np.arange(b), b - 1)
        cols = np.array([j for i in range(b) for j in range(b) if j != i])
        columns.append((qn @ pn.T)[rows, cols].reshape(b, b - 1))
    logits = (columns[0] if len(columns) == 1 else T.concat(columns, axis=1)) * (1.0 / temperature)
    return (T.logsumexp(logits, axis=-1) - logits[:, 0]).mean()


def contrastive_loss(q, pos, negs, temperature: float = DEFAULT_TEMPERATURE) -> float:
    """Contrastive loss of a single query against one positive and ``negs``."""
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64).reshape(1, -1)
    pos = np.asarray(pos.data if isinstance(pos, Tensor) else pos, dtype=np.float64).reshape(1, -1)
    negs = np.asarray(negs.data if isinstance(negs, Tensor) else negs, dtype=np.float64)
    negs = negs.reshape(1, -1, q.shape[1]) if negs.size else np.zeros((1, 0, q.shape[1]))
    return float(info_nce(Tensor(q), Tensor(pos), Tensor(negs), temperature).item())


def _as_batch_neg(t: Tensor, b: int) -> Tensor:
    if t.ndim == 3:
        return t
    n = t.shape[0] // b if b else 0
    if n * b != t.shape[0]:
        raise DimensionError(f"{t.shape[0]} negative rows do not split over {b} queries")
    return t.reshape(b, n, t.shape[1])


def total_3dml_loss(
    query_taps: Mapping[int, Tensor],
    pos_taps: Mapping[int, Tensor],
    neg_taps: Mapping[int, Tensor] | None,
    cfg: LossConfig,
    in_batch: bool = False,
) -> Tensor:
    """Weighted sum over (layer, prefix dim) of the batch-mean contrastive loss.

    Negative taps are ``(B*n) x d`` rows grouped per query, or ``B x n x d``.
    """
    total = None
    for layer in cfg.mll_layers:
        if layer not in query_taps or layer not in pos_taps:
            raise UsageError(f"missing tap for layer {layer}")
        q, p = query_taps[layer], pos_taps[layer]
        negs = None
        if neg_taps is not None:
            if layer not in neg_taps:
                raise UsageError(f"missing negative tap for layer {layer}")
            negs = _as_batch_neg(neg_taps[layer], q.shape[0])
        for dim in cfg.mrl_dims:
            n_d = None if negs is None else negs[:, :, :dim]
            term = info_nce(q[:, :dim], p[:, :dim], n_d, cfg.temperature, in_batch)
            term = term * cfg.weight(layer, dim)
            total = term if total is None else total + term
    if total is None:
        raise ConfigurationError("empty layer or dimension set")
    return total


class RankSampler:
    """Uniform draws from the MEL rank set; one draw per optimization step."""

    def __init__(self, rank_set: Sequence[int], seed: int = 0):
        if not rank_set:
            raise ConfigurationError("rank set is empty")
        self.rank_set = tuple(int(r) for r in rank_set)
        self.rng = np.random.default_rng(seed)

    def __call__(self) -> int:
        return sample_mel_rank(self.rank_set, self.rng)

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict):
        self.rng.bit_generator.state = state


def sample_mel_rank(rank_set: Sequence[int], rng: np.random.Generator) -> int:
    if not rank_set:
        raise ConfigurationError("rank set is empty")
    return int(rank_set[int(rng.integers(len(rank_set)))])


@dataclass
class ContrastiveBatch:
    """Per-query positives and negatives; payloads may be texts or vectors."""

    queries: list
    positives: list
    hard_negatives: list[list]
    in_batch: bool = False
    format: str = "retrieval"

    def __post_init__(self):
        if len(self.queries) != len(self.positives) or len(self.queries) != len(self.hard_negatives):
            raise DimensionError("queries, positives and hard negatives differ in length")
        counts = {len(n) for n in self.hard_negatives}
        if len(counts) > 1:
            raise UsageError(f"non-uniform hard-negative counts in batch: {sorted(counts)}")

    def __len__(self):
        return len(self.queries)

    @property
    def n_hard(self) -> int:
        return len(self.hard_negatives[0]) if self.hard_negatives else 0

    def negatives_for(self, i: int) -> list:
        negs = list(self.hard_negatives[i])
        if self.in_batch:
            negs += [p for j, p in enumerate(self.positives) if j != i]
        return negs


def assemble_negatives(samples, use_in_batch: bool = False) -> ContrastiveBatch:
    """Build a batch from homogeneous samples; in-batch negatives only for retrieval."""
    samples = list(samples)
    if not samples:
        raise UsageError("empty batch")
    formats = {s.format for s in samples}
    if len(formats) > 1:
        raise UsageError(f"mixed formats in one batch: {sorted(formats)}")
    fmt = formats.pop()
    if use_in_batch and fmt != "retrieval":
        raise UsageError(f"in-batch negatives are not allowed for {fmt} batches")
    return ContrastiveBatch(
        queries=[s.query for s in samples],
        positives=[s.positive for s in samples],
        hard_negatives=[list(s.hard_negatives) for s in samples],
        in_batch=use_in_batch,
        format=fmt,
    )

