"""scikit-learn style wrapper: ``fit`` on contrastive samples, ``transform`` texts."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .deploy import load_model, save_model
from .evaluation import classify_by_label_similarity
from .model import ModelConfig, embed, init_model
from .objective import DEFAULT_HARD_NEGATIVES, DEFAULT_TEMPERATURE, LossConfig
from .training import TrainConfig, train
from .validation import check_in_range, check_samples, check_texts


class MatryoshkaEmbedder(TransformerMixin, BaseEstimator):
    """Text embedder trained jointly over layers, prefix dims and embedding ranks.

    ``depth``, ``dim`` and ``rank`` choose the sub-model used by
    :meth:`transform`; ``None`` means the full model. They can be changed
    with ``set_params`` after fitting without retraining.
    """

    def __init__(
        self,
        vocab_size=4096,
        d_model=64,
        n_layers=8,
        n_heads=4,
        d_ff=128,
        max_seq_len=64,
        mel_rank=32,
        mel_rank_set=(4, 8, 16, 32),
        mll_layers=(1, 2, 4, 8),
        mrl_dims=(8, 16, 32, 64),
        temperature=DEFAULT_TEMPERATURE,
        n_hard_negatives=DEFAULT_HARD_NEGATIVES,
        lr=1e-3,
        weight_decay=0.01,
        batch_size=16,
        max_steps=200,
        in_batch_negatives=True,
        seed=0,
        depth=None,
        dim=None,
        rank=None,
    ):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.max_seq_len = max_seq_len
        self.mel_rank = mel_rank
        self.mel_rank_set = mel_rank_set
        self.mll_layers = mll_layers
        self.mrl_dims = mrl_dims
        self.temperature = temperature
        self.n_hard_negatives = n_hard_negatives
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.in_batch_negatives = in_batch_negatives
        self.seed = seed
        self.depth = depth
        self.dim = dim
        self.rank = rank

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            max_seq_len=self.max_seq_len,
            mel_rank=self.mel_rank,
            mel_rank_set=tuple(self.mel_rank_set) if self.mel_rank is not None else (),
            mll_layers=tuple(self.mll_layers),
            mrl_dims=tuple(self.mrl_dims),
        )

    def fit(self, X, y=None):
        """Train from scratch on ``X`` (Samples, dicts or ``(q, pos, negs)`` tuples)."""
        samples = check_samples(X)
        config = self._model_config()
        weights = init_model(config, seed=self.seed)
        cfg = TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            max_steps=self.max_steps,
            seed=self.seed,
            in_batch_negatives=self.in_batch_negatives,
        )
        loss_cfg = LossConfig.for_model(
            config, temperature=self.temperature, n_hard_negatives=self.n_hard_negatives
        )
        result = train(weights, _cycle(samples), cfg, loss_cfg)
        self.weights_ = result.weights
        self.history_ = result.history
        self.n_features_out_ = self.dim or config.d_model
        return self

    def _check_fitted(self):
        if not hasattr(self, "weights_"):
            raise NotFittedError("MatryoshkaEmbedder is not fitted yet; call fit or load")

    def _axes(self):
        cfg = self.weights_.config
        depth = cfg.n_layers if self.depth is None else check_in_range(self.depth, "depth", 1, cfg.n_layers)
        dim = cfg.d_model if self.dim is None else check_in_range(self.dim, "dim", 1, cfg.d_model)
        return depth, dim, self.rank

    def transform(self, X) -> np.ndarray:
        """Unit-norm embeddings, one row per text."""
        self._check_fitted()
        depth, dim, rank = self._axes()
        return embed(self.weights_, check_texts(X), depth=depth, dim=dim, rank=rank)

    def predict(self, X, label_texts) -> np.ndarray:
        """Label index whose text is most similar to each input."""
        self._check_fitted()
        depth, dim, rank = self._axes()
        return np.asarray(
            classify_by_label_similarity(self.weights_, check_texts(X), label_texts, depth, dim, rank)
        )

    def save(self, path):
        self._check_fitted()
        save_model(self.weights_, path)

    @classmethod
    def load(cls, path, **params) -> "MatryoshkaEmbedder":
        weights = load_model(path)
        cfg = weights.config
        est = cls(
            vocab_size=cfg.vocab_size,
            d_model=cfg.d_model,
            n_layers=cfg.n_layers,
            n_heads=cfg.n_heads,
            d_ff=cfg.d_ff,
            max_seq_len=cfg.max_seq_len,
            mel_rank=cfg.mel_rank,
            mel_rank_set=cfg.mel_rank_set,
            mll_layers=cfg.mll_layers,
            mrl_dims=cfg.mrl_dims,
            **params,
        )
        est.weights_ = weights
        est.history_ = []
        est.n_features_out_ = est.dim or cfg.d_model
        return est


def _cycle(samples):
    while True:
        yield from samples
