"""Throughput and memory of depth-pruned and rank-compressed models."""

from __future__ import annotations

import json
import logging
import statistics
import time
import tracemalloc
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .deploy import embedding_parameter_count, model_parameter_count, to_efficiency
from .errors import ParameterError, UsageError
from .model import ModelWeights, forward_taps
from .tokenizer import BOS, EOS

log = logging.getLogger(__name__)

BENCH_FORMAT = "m3d-bench"
BENCH_VERSION = 1


@dataclass(frozen=True)
class Workload:
    batch_size: int = 32
    seq_len: int = 32
    iterations: int = 4
    trials: int = 5
    warmups: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.trials < 5:
            raise ParameterError("at least 5 timed trials are required")
        if self.warmups < 0 or self.batch_size < 1 or self.iterations < 1:
            raise ParameterError("batch_size and iterations must be positive, warmups >= 0")
        if self.seq_len < 2:
            raise ParameterError("seq_len must be >= 2")

    @property
    def tokens_per_trial(self) -> int:
        return self.batch_size * self.seq_len * self.iterations


@dataclass
class BenchResult:
    depth: int
    rank_mode: str
    rank: int | None
    parameter_count: int
    embedding_parameter_count: int
    peak_memory_bytes: int | None
    tokens_per_second: float
    trial_tokens_per_second: list[float] = field(default_factory=list)
    batch_size: int = 0
    seq_len: int = 0

    @property
    def memory_label(self) -> str:
        if self.peak_memory_bytes is None:
            return "unmeasured"
        return f"{self.peak_memory_bytes / 2**20:.2f}"


def workload_tokens(workload: Workload, vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Full-length sequences ``BOS w... EOS`` of seeded random word ids."""
    rng = np.random.default_rng(workload.seed)
    ids = rng.integers(3, vocab_size, size=(workload.batch_size, workload.seq_len), dtype=np.int64)
    ids[:, 0] = BOS
    ids[:, -1] = EOS
    return ids, np.full(workload.batch_size, workload.seq_len, dtype=np.int64)


def _peak_memory(run) -> int | None:
    try:
        tracemalloc.start()
        tracemalloc.reset_peak()
        run()
        _, peak = tracemalloc.get_traced_memory()
        return int(peak)
    except Exception as exc:  # memory is informational only
        log.warning("memory sampling unavailable: %s", exc)
        return None
    finally:
        tracemalloc.stop()


def measure(weights: ModelWeights, depth: int, workload: Workload = Workload(), rank: int | None = None,
            rank_mode: str | None = None) -> BenchResult:
    """Median tokens/s of the tape-free forward pass at ``depth``.

    ``rank`` re-factorizes the embedding (efficiency mode) before timing.
    """
    cfg = weights.config
    if not 1 <= depth <= cfg.n_layers:
        raise UsageError(f"depth {depth} outside [1, {cfg.n_layers}]")
    if workload.seq_len > cfg.max_seq_len:
        raise UsageError(f"seq_len {workload.seq_len} exceeds max_seq_len {cfg.max_seq_len}")
    model = weights.pruned(depth)
    if rank is not None:
        model = to_efficiency(model, rank)
    mode = rank_mode or ("factorized" if model.config.factorized else "dense")
    tokens = workload_tokens(workload, cfg.vocab_size)

    def run():
        for _ in range(workload.iterations):
            forward_taps(model, tokens, None, [depth])

    rates = []
    with threadpool_limits(limits=1):
        for _ in range(workload.warmups):
            run()
        for _ in range(workload.trials):
            t0 = time.perf_counter()
            run()
            rates.append(workload.tokens_per_trial / (time.perf_counter() - t0))
        peak = _peak_memory(run)
    mcfg = model.config
    return BenchResult(
        depth=depth,
        rank_mode=mode,
        rank=mcfg.mel_rank,
        parameter_count=model_parameter_count(mcfg),
        embedding_parameter_count=embedding_parameter_count(mcfg.vocab_size, mcfg.d_model, mcfg.mel_rank),
        peak_memory_bytes=peak,
        tokens_per_second=statistics.median(rates),
        trial_tokens_per_second=rates,
        batch_size=workload.batch_size,
        seq_len=workload.seq_len,
    )


def run_bench(weights: ModelWeights, depths: Sequence[int] | None = None, workload: Workload = Workload(),
              ranks: Sequence[int | None] = (None,)) -> list[BenchResult]:
    depths = sorted(set(depths or weights.config.mll_layers), reverse=True)
    return [measure(weights, d, workload, r) for r in ranks for d in depths]


def format_table(results: Sequence[BenchResult]) -> str:
    lines = ["layers\trank\tparams\tpeak_mem_mib\ttokens_per_s"]
    for r in results:
        rank = "-" if r.rank is None else str(r.rank)
        lines.append(f"{r.depth}\t{rank}\t{r.parameter_count}\t{r.memory_label}\t{r.tokens_per_second:.0f}")
    return "\n".join(lines)


def save_results(results: Sequence[BenchResult], path, workload: Workload):
    doc = {
        "format": BENCH_FORMAT,
        "format_version": BENCH_VERSION,
        "workload": asdict(workload),
        "results": [asdict(r) for r in results],
    }
    Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")
