"""Causal transformer embedder with a factorized (MEL) token embedding.

The forward pass exposes the EOS-position hidden state of selected layers,
each passed through the shared final RMS norm ("taps"). An embedding at
depth ``l`` and width ``d'`` is the first ``d'`` coordinates of tap ``l``,
L2-normalized.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import DataError, ParameterError, UsageError
from .linalg import truncated_svd
from .tensor import Tensor
from .tokenizer import PAD, VocabSpec, encode_batch

INIT_SCALE = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 4096
    d_model: int = 64
    n_layers: int = 8
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 64
    mel_rank: int | None = 32
    mel_rank_set: tuple[int, ...] = (4, 8, 16, 32)
    mll_layers: tuple[int, ...] = (1, 2, 4, 8)
    mrl_dims: tuple[int, ...] = (8, 16, 32, 64)
    norm_eps: float = 1e-6
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("mel_rank_set", "mll_layers", "mrl_dims"):
            object.__setattr__(self, name, tuple(int(x) for x in getattr(self, name)))
        if self.vocab_size < 8:
            raise ParameterError("vocab_size must be >= 8")
        if self.d_model % self.n_heads or (self.d_model // self.n_heads) % 2:
            raise ParameterError("d_model / n_heads must be an even integer")
        if self.n_layers < 1 or self.max_seq_len < 2:
            raise ParameterError("need n_layers >= 1 and max_seq_len >= 2")
        if self.mel_rank is not None:
            if not 1 <= self.mel_rank <= min(self.vocab_size, self.d_model):
                raise ParameterError(f"mel_rank {self.mel_rank} outside [1, min(v, d_model)]")
            rs = self.mel_rank_set
            if not rs or list(rs) != sorted(set(rs)) or rs[-1] != self.mel_rank or rs[0] < 1:
                raise ParameterError("mel_rank_set must be ascending with max == mel_rank")
        elif self.mel_rank_set:
            raise ParameterError("mel_rank_set must be empty for a dense embedding")
        ls = self.mll_layers
        if list(ls) != sorted(set(ls)) or not ls or ls[0] < 1 or ls[-1] != self.n_layers:
            raise ParameterError("mll_layers must be ascending within [1, L] and end at L")
        ds = self.mrl_dims
        if list(ds) != sorted(set(ds)) or not ds or ds[0] < 1 or ds[-1] != self.d_model:
            raise ParameterError("mrl_dims must be ascending within [1, d_model] and end at d_model")

    @property
    def factorized(self) -> bool:
        return self.mel_rank is not None

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def pruned(self, n_layers: int) -> "ModelConfig":
        if not 1 <= n_layers <= self.n_layers:
            raise ParameterError(f"cannot prune {self.n_layers} layers to {n_layers}")
        layers = tuple(sorted({l for l in self.mll_layers if l <= n_layers} | {n_layers}))
        return replace(self, n_layers=n_layers, mll_layers=layers)

    def with_rank(self, rank: int | None) -> "ModelConfig":
        if rank is None:
            return replace(self, mel_rank=None, mel_rank_set=())
        ranks = tuple(sorted({r for r in self.mel_rank_set if r <= rank} | {rank}))
        return replace(self, mel_rank=rank, mel_rank_set=ranks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["num_hidden_layers"] = d.pop("n_layers")
        for k in ("mel_rank_set", "mll_layers", "mrl_dims"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "num_hidden_layers" in d:
            d["n_layers"] = d.pop("num_hidden_layers")
        return cls(**d)


@dataclass
class FactorizedEmbedding:
    """Token table stored as ``A @ B`` with ``A: v x r`` and ``B: r x d``."""

    A: Tensor
    B: Tensor

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"embed.A": self.A, "embed.B": self.B}


@dataclass
class DenseEmbedding:
    E: Tensor

    @property
    def rank(self) -> int:
        return self.E.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"embed.E": self.E}


LAYER_TENSORS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down")


@dataclass
class LayerWeights:
    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ffn_norm: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor


@dataclass
class ModelWeights:
    config: ModelConfig
    embedding: FactorizedEmbedding | DenseEmbedding
    layers: list[LayerWeights]
    final_norm: Tensor
    _rope_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(self.layers) != self.config.n_layers:
            raise ParameterError(
                f"{len(self.layers)} layer blocks for a {self.config.n_layers}-layer config"
            )

    @property
    def dtype(self):
        return self.final_norm.dtype

    def named_parameters(self) -> dict[str, Tensor]:
        params = dict(self.embedding.parameters())
        for i, layer in enumerate(self.layers):
            for name in LAYER_TENSORS:
                params[f"layers.{i}.{name}"] = getattr(layer, name)
        params["final_norm"] = self.final_norm
        return params

    @classmethod
    def from_named(cls, config: ModelConfig, params: dict) -> "ModelWeights":
        def t(name):
            v = params[name]
            return v if isinstance(v, Tensor) else Tensor(v)

        if "embed.E" in params:
            emb = DenseEmbedding(t("embed.E"))
        else:
            emb = FactorizedEmbedding(t("embed.A"), t("embed.B"))
        layers = [
            LayerWeights(**{n: t(f"layers.{i}.{n}") for n in LAYER_TENSORS})
            for i in range(config.n_layers)
        ]
        return cls(config, emb, layers, t("final_norm"))

    def requires_grad_(self, flag: bool = True) -> "ModelWeights":
        for p in self.named_parameters().values():
            p.requires_grad = flag
        return self

    def copy(self) -> "ModelWeights":
        return ModelWeights.from_named(
            self.config, {k: Tensor(v.data.copy()) for k, v in self.named_parameters().items()}
        )

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights.from_named(
            self.config,
            {k: Tensor(v.data.astype(dtype)) for k, v in self.named_parameters().items()},
        )

    def pruned(self, n_layers: int) -> "ModelWeights":
        return ModelWeights(
            self.config.pruned(n_layers), self.embedding, self.layers[:n_layers], self.final_norm
        )

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.named_parameters().values()))

    def rope_tables(self, length: int):
        key = (length, self.dtype.str)
        if key not in self._rope_cache:
            self._rope_cache[key] = rope_tables(
                length, self.config.head_dim, self.config.rope_base, self.dtype
            )
        return self._rope_cache[key]


def rope_tables(length: int, head_dim: int, base: float, dtype=np.float64):
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.arange(length, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(angles)] * 2, axis=-1).astype(dtype)
    sin = np.concatenate([np.sin(angles)] * 2, axis=-1).astype(dtype)
    return cos, sin


def factorize_embedding(E, rank: int) -> FactorizedEmbedding:
    """``A = U_r diag(S_r)``, ``B = Vt_r`` from the truncated SVD of ``E``."""
    res = truncated_svd(E, rank)
    return FactorizedEmbedding(
        A=Tensor(res.U.data * res.S.data[None, :]), B=Tensor(res.Vt.data.copy())
    )


def init_model(
    config: ModelConfig,
    seed: int = 0,
    base_embedding=None,
    dtype=np.float32,
) -> ModelWeights:
    """Seeded initialization; the factorized table always comes from an SVD."""
    rng = np.random.default_rng(seed)
    v, d = config.vocab_size, config.d_model

    def normal(*shape):
        return rng.normal(0.0, INIT_SCALE, size=shape)

    if base_embedding is not None:
        base = np.asarray(base_embedding.data if isinstance(base_embedding, Tensor) else base_embedding)
        if base.shape != (v, d):
            raise ParameterError(f"base_embedding shape {base.shape} != {(v, d)}")
        base = base.astype(np.float64)
    else:
        base = None

    if config.factorized:
        r = config.mel_rank
        if base is None:
            # product of random factors has entries with std INIT_SCALE
            base = normal(v, r) @ rng.normal(0.0, 1.0 / np.sqrt(r), size=(r, d))
        fe = factorize_embedding(base, r)
        embedding = FactorizedEmbedding(Tensor(fe.A.data.astype(dtype)), Tensor(fe.B.data.astype(dtype)))
    else:
        if base is None:
            base = normal(v, d)
        embedding = DenseEmbedding(Tensor(base.astype(dtype)))

    layers = []
    ones = np.ones(d)
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                attn_norm=Tensor(ones.astype(dtype)),
                wq=Tensor(normal(d, d).astype(dtype)),
                wk=Tensor(normal(d, d).astype(dtype)),
                wv=Tensor(normal(d, d).astype(dtype)),
                wo=Tensor(normal(d, d).astype(dtype)),
                ffn_norm=Tensor(ones.astype(dtype)),
                w_gate=Tensor(normal(d, config.d_ff).astype(dtype)),
                w_up=Tensor(normal(d, config.d_ff).astype(dtype)),
                w_down=Tensor(normal(config.d_ff, d).astype(dtype)),
            )
        )
    return ModelWeights(config, embedding, layers, Tensor(ones.astype(dtype)))


def effective_embedding(emb: FactorizedEmbedding, rank: int) -> Tensor:
    """Dense ``v x d`` table from the leading ``rank`` components."""
    if not 1 <= rank <= emb.rank:
        raise ParameterError(f"rank {rank} outside [1, {emb.rank}]")
    if rank == emb.rank:
        return T.matmul(emb.A, emb.B)
    return T.matmul(emb.A[:, :rank], emb.B[:rank])


def pad_batch(sequences: Sequence[Sequence[int]]):
    """Right-pad id sequences with PAD; returns (ids[N, T], lengths[N])."""
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    if len(sequences) == 0 or lengths.min() < 1:
        raise DataError("every sequence needs at least one token")
    ids = np.full((len(sequences), int(lengths.max())), PAD, dtype=np.int64)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s
    return ids, lengths


def _lookup(embedding, ids: np.ndarray, rank: int | None) -> Tensor:
    if isinstance(embedding, DenseEmbedding):
        if rank is not None and rank != embedding.rank:
            raise UsageError("a dense embedding has no sub-rank; use rank=None")
        return T.embedding(embedding.E, ids)
    r = embedding.rank if rank is None else rank
    if not 1 <= r <= embedding.rank:
        raise ParameterError(f"rank {r} outside [1, {embedding.rank}]")
    rows = T.embedding(embedding.A, ids)
    if r == embedding.rank:
        return T.matmul(rows, embedding.B)
    return T.matmul(rows[..., :r], embedding.B[:r])


def _attention(h: Tensor, layer: LayerWeights, cfg: ModelConfig, cos, sin, mask) -> Tensor:
    n, t, d = h.shape
    nh, hd = cfg.n_heads, cfg.head_dim

    def heads(x):
        return x.reshape(n, t, nh, hd).transpose(0, 2, 1, 3)

    q = T.rope(heads(h @ layer.wq), cos, sin)
    k = T.rope(heads(h @ layer.wk), cos, sin)
    v = heads(h @ layer.wv)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
    probs = T.softmax(scores, axis=-1, mask=mask)
    out = (probs @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
    return out @ layer.wo


def _block(h: Tensor, layer: LayerWeights, cfg: ModelConfig, cos, sin, mask) -> Tensor:
    h = h + _attention(T.rms_norm(h, layer.attn_norm, cfg.norm_eps), layer, cfg, cos, sin, mask)
    x = T.rms_norm(h, layer.ffn_norm, cfg.norm_eps)
    return h + (T.silu(x @ layer.w_gate) * (x @ layer.w_up)) @ layer.w_down


def forward_taps(
    weights: ModelWeights,
    tokens,
    rank: int | None = None,
    layers: Iterable[int] | None = None,
) -> dict[int, Tensor]:
    """Final-normed EOS hidden state for every requested layer.

    ``tokens`` is a list of id sequences (each ending in EOS) or a pair
    ``(ids, lengths)`` as returned by :func:`pad_batch`. ``layers`` defaults
    to the config's MLL layers; blocks deeper than the deepest requested
    layer are never evaluated.
    """
    cfg = weights.config
    ids, lengths = tokens if isinstance(tokens, tuple) else pad_batch(tokens)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise DataError(f"token id out of range [0, {cfg.vocab_size})")
    if ids.shape[1] > cfg.max_seq_len:
        raise DataError(f"sequence length {ids.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    wanted = sorted(set(cfg.mll_layers if layers is None else layers))
    if not wanted or wanted[0] < 1 or wanted[-1] > cfg.n_layers:
        raise UsageError(f"tap layers {wanted} outside [1, {cfg.n_layers}]")

    n, t = ids.shape
    cos, sin = weights.rope_tables(t)
    mask = np.tril(np.ones((t, t), dtype=bool))
    eos_rows = (np.arange(n), lengths - 1)

    h = _lookup(weights.embedding, ids, rank)
    taps: dict[int, Tensor] = {}
    for depth in range(1, wanted[-1] + 1):
        h = _block(h, weights.layers[depth - 1], cfg, cos, sin, mask)
        if depth in wanted:
            taps[depth] = T.rms_norm(h[eos_rows], weights.final_norm, cfg.norm_eps)
    return taps


def encode_texts(texts: Sequence[str], config: ModelConfig) -> list[list[int]]:
    return encode_batch(texts, VocabSpec(config.vocab_size), config.max_seq_len)


def embed(
    weights: ModelWeights,
    texts: Sequence[str],
    depth: int | None = None,
    dim: int | None = None,
    rank: int | None = None,
    batch_size: int = 256,
) -> np.ndarray:
    """Unit-norm ``len(texts) x dim`` embeddings at the given depth/width/rank."""
    cfg = weights.config
    depth = cfg.n_layers if depth is None else depth
    dim = cfg.d_model if dim is None else dim
    if not 1 <= depth <= cfg.n_layers:
        raise UsageError(f"depth {depth} not available in a {cfg.n_layers}-layer model")
    if not 1 <= dim <= cfg.d_model:
        raise ParameterError(f"dim {dim} outside [1, {cfg.d_model}]")
    if len(texts) == 0:
        return np.zeros((0, dim), dtype=weights.dtype)
    seqs = encode_texts(texts, cfg)
    out = []
    for start in range(0, len(seqs), batch_size):
        tap = forward_taps(weights, seqs[start : start + batch_size], rank, [depth])[depth]
        out.append(T.l2_normalize(tap[:, :dim]).data)
    return np.concatenate(out, axis=0)

