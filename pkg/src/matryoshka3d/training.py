"""AdamW training loop for the layer/dimension/rank objective."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from itertools import islice
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .data import RETRIEVAL, Sample, iter_batches
from .deploy import load_checkpoint, load_model, merge_weights, save_model
from .errors import NumericalError, ParameterError, UsageError
from .model import ModelWeights, encode_texts, forward_taps, pad_batch
from .objective import LossConfig, RankSampler, assemble_negatives, total_3dml_loss

log = logging.getLogger(__name__)

# Learning rates and per-device batch sizes used for the full-scale models.
FULL_SCALE_PRESETS = {
    "0.6B": {"lr": 1e-5, "batch_size": 16, "data_parallel": 32},
    "1.7B": {"lr": 9e-6, "batch_size": 16, "data_parallel": 32},
    "4B": {"lr": 8e-6, "batch_size": 8, "data_parallel": 64},
    "8B": {"lr": 7e-6, "batch_size": 4, "data_parallel": 128},
}


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 16
    max_steps: int = 200
    checkpoint_interval: int = 500
    merge_window: int = 5
    seed: int = 0
    grad_clip: float | None = 1.0
    in_batch_negatives: bool = True
    stage: int = 1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0 or self.eps <= 0 or self.batch_size < 1 or self.max_steps < 0:
            raise ParameterError("lr, eps, batch_size must be positive and max_steps >= 0")
        if self.weight_decay < 0 or not all(0 <= b < 1 for b in self.betas):
            raise ParameterError("weight_decay must be >= 0 and betas in [0, 1)")
        if self.checkpoint_interval < 1 or self.merge_window < 1:
            raise ParameterError("checkpoint_interval and merge_window must be >= 1")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"optim.m.{k}": a for k, a in self.m.items()}
        out.update({f"optim.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, step: int) -> "OptimizerState":
        m = {k[len("optim.m."):]: a for k, a in tensors.items() if k.startswith("optim.m.")}
        v = {k[len("optim.v."):]: a for k, a in tensors.items() if k.startswith("optim.v.")}
        return cls(m, v, step)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global L2 norm <= ``max_norm``; returns the old norm."""
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * np.asarray(scale, dtype=grads[k].dtype)
    return total


def adamw_step(params: dict, grads: dict[str, np.ndarray], state: OptimizerState, cfg: TrainConfig):
    """Decoupled weight decay Adam with bias correction; updates ``params`` in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {name}", step=state.step + 1)
    for name, p in params.items():
        if p.shape != state.m[name].shape:
            raise ParameterError(f"optimizer state shape mismatch for {name}")
    state.step += 1
    b1, b2 = cfg.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        data = p.data * (1.0 - cfg.lr * cfg.weight_decay)
        data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = data.astype(p.data.dtype, copy=False)
    return params, state


def batch_loss(weights: ModelWeights, batch: Sequence[Sample], loss_cfg: LossConfig,
               rank: int | None, in_batch: bool):
    """Tape-recorded objective for one batch; returns (loss tensor, tape)."""
    fmt = batch[0].format
    cb = assemble_negatives(batch, use_in_batch=in_batch and fmt == RETRIEVAL)
    b, n = len(cb), cb.n_hard
    texts = list(cb.queries) + list(cb.positives) + [t for negs in cb.hard_negatives for t in negs]
    ids = pad_batch(encode_texts(texts, weights.config))
    with T.GradTape() as tape:
        taps = forward_taps(weights, ids, rank, loss_cfg.mll_layers)
        q = {l: t[:b] for l, t in taps.items()}
        p = {l: t[b : 2 * b] for l, t in taps.items()}
        negs = {l: t[2 * b :].reshape(b, n, t.shape[1]) for l, t in taps.items()} if n else None
        loss = total_3dml_loss(q, p, negs, loss_cfg, in_batch=cb.in_batch)
    return loss, tape


@dataclass
class TrainResult:
    weights: ModelWeights
    history: list[dict] = field(default_factory=list)
    optimizer: OptimizerState | None = None
    checkpoints: list[Path] = field(default_factory=list)


def _train_state(step, batches_done, sampler, cfg: TrainConfig) -> dict:
    return {
        "step": step,
        "batches_consumed": batches_done,
        "stage": cfg.stage,
        "rank_sampler_state": sampler.get_state() if sampler else None,
        "train_config": asdict(cfg),
    }


def train(
    weights: ModelWeights,
    data: Iterable[Sample],
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    checkpoint_dir=None,
    log_path=None,
    resume: "Path | str | None" = None,
) -> TrainResult:
    """Run ``cfg.max_steps`` optimization steps over ``data``.

    Each step draws one MEL sub-rank that every forward pass in the step
    uses. The input weights are not modified. With ``resume`` the optimizer,
    rank sampler and data position continue from that checkpoint.
    """
    weights = weights.copy()
    start_step, skip_batches = 0, 0
    opt_state = None
    state = None
    if resume is not None:
        ck = load_checkpoint(resume)
        state = ck.extra.get("train_state")
        if state is None:
            raise UsageError(f"{resume} holds no training state")
        weights = ck.weights
        if state.get("stage") != cfg.stage:
            # new stage: keep the weights, restart optimizer, sampler and data
            state = None
        else:
            opt_state = OptimizerState.from_tensors(ck.extra_tensors, state["step"])
            start_step, skip_batches = state["step"], state["batches_consumed"]
    sampler = RankSampler(weights.config.mel_rank_set, cfg.seed) if weights.config.factorized else None
    if sampler and state and state.get("rank_sampler_state"):
        sampler.set_state(state["rank_sampler_state"])
    params = weights.requires_grad_(True).named_parameters()
    if opt_state is None or not opt_state.m:
        opt_state = OptimizerState.zeros_like(params)

    batches: Iterator[list[Sample]] = iter_batches(data, cfg.batch_size, loss_cfg.n_hard_negatives)
    batches = islice(batches, skip_batches, None)
    result = TrainResult(weights, optimizer=opt_state)
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    batches_done = skip_batches
    try:
        for step in range(start_step + 1, cfg.max_steps + 1):
            batch = next(batches, None)
            if batch is None:
                log.info("data exhausted after %d steps", step - 1)
                break
            batches_done += 1
            rank = sampler() if sampler else None
            try:
                loss, tape = batch_loss(weights, batch, loss_cfg, rank, cfg.in_batch_negatives)
                grads_by_t = T.backward(loss, tape, wrt=list(params.values()))
                grads = {k: grads_by_t[p] for k, p in params.items()}
                if cfg.grad_clip is not None:
                    clip_grad_norm(grads, cfg.grad_clip)
                adamw_step(params, grads, opt_state, cfg)
            except NumericalError as exc:
                raise NumericalError(str(exc), step=step) from exc
            value = float(loss.item())
            entry = {"step": step, "stage": cfg.stage, "rank": rank, "loss": value}
            result.history.append(entry)
            if log_fh:
                log_fh.write(f"{step}\t{cfg.stage}\t{rank if rank is not None else '-'}\t{value:.6f}\n")
            if checkpoint_dir is not None and step % cfg.checkpoint_interval == 0:
                path = Path(checkpoint_dir) / f"step_{step:07d}.m3d"
                save_model(
                    weights,
                    path,
                    extra={"train_state": _train_state(step, batches_done, sampler, cfg)},
                    extra_tensors=opt_state.tensors(),
                )
                result.checkpoints.append(path)
    finally:
        if log_fh:
            log_fh.close()
    weights.requires_grad_(False)
    return result


def merge_checkpoints(paths: Sequence) -> ModelWeights:
    """Elementwise mean of the model weights stored in ``paths``."""
    return merge_weights([load_model(p) for p in paths])


def last_checkpoints(directory, k: int) -> list[Path]:
    paths = sorted(Path(directory).glob("step_*.m3d"))
    return paths[-k:]
