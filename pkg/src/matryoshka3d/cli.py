"""Command-line entry point: ``m3d <subcommand> ...``.

Tables go to stdout, diagnostics to stderr. Every artifact ``X`` is written
with a ``X.config.json`` sidecar holding the resolved configuration.
Exit codes: 0 ok, 1 usage, 2 data, 3 format, 4 numerical.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, fields
from itertools import count
from pathlib import Path

import numpy as np

from . import __version__
from .bench import Workload, format_table, run_bench, save_results
from .data import MixtureSpec, Sample, load_jsonl, mine_hard_negatives, mixture_iterator, write_jsonl
from .deploy import (
    dump_manifest,
    load_model,
    merge_weights,
    read_manifest,
    save_model,
    set_num_hidden_layers,
    to_compatibility,
    to_efficiency,
)
from .errors import ConfigurationError, DataError, Matryoshka3DError, UsageError
from .evaluation import SynthTaskSpec, generate_synthetic_task, run_sweep, task_from_samples
from .model import ModelConfig, embed, init_model
from .objective import LossConfig
from .training import TrainConfig, last_checkpoints, train

log = logging.getLogger("matryoshka3d")

DEFAULT_CONFIG = {
    "model": ModelConfig().to_dict(),
    "loss": {"temperature": 0.5, "n_hard_negatives": 7},
    "train": {k: v for k, v in asdict(TrainConfig()).items()},
    "data": {"sources": [], "cap": 100_000, "seed": 0, "synthetic": asdict(SynthTaskSpec())},
    "eval": {"depths": None, "dims": None, "ranks": None, "rank_mode": "svd", "k": 10,
             "synthetic": asdict(SynthTaskSpec())},
    "bench": {**asdict(Workload()), "depths": None, "ranks": [None]},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigurationError(f"unknown config key {where + key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: config must be a JSON object")
    return _merge(DEFAULT_CONFIG, raw)


def write_sidecar(artifact, resolved: dict):
    path = Path(str(artifact) + ".config.json")
    path.write_text(json.dumps(resolved, indent=1, sort_keys=True, default=str), encoding="utf-8")
    return path


def _ints(text):
    if text is None:
        return None
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _set(section: dict, key: str, value):
    if value is not None:
        section[key] = value


def _read_texts(path) -> list[str]:
    """One text per line; JSONL lines with a ``text`` field are unwrapped."""
    texts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.lstrip().startswith("{"):
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}: malformed JSON ({exc.msg})", lineno) from None
                if not isinstance(rec.get("text"), str):
                    raise DataError(f"{path}: record has no 'text' field", lineno)
                texts.append(rec["text"])
            else:
                texts.append(line)
    return texts


def _training_stream(resolved: dict, stage: int):
    data = resolved["data"]
    if data["sources"]:
        sources = {Path(p).stem: list(load_jsonl(p)) for p in data["sources"]}
        for epoch in count():
            spec = MixtureSpec(stage=stage, cap=data["cap"], seed=data["seed"] + epoch)
            yield from mixture_iterator(spec, sources)
    else:
        task = generate_synthetic_task(SynthTaskSpec(**data["synthetic"]))
        yield from task.training_samples(seed=data["seed"] + 1, n_hard=resolved["loss"]["n_hard_negatives"])


# subcommands


def cmd_train(args, resolved):
    t = resolved["train"]
    _set(t, "max_steps", args.steps)
    _set(t, "lr", args.lr)
    _set(t, "batch_size", args.batch_size)
    _set(t, "seed", args.seed)
    _set(t, "checkpoint_interval", args.checkpoint_interval)
    t["stage"] = args.stage
    if args.data:
        resolved["data"]["sources"] = list(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model_cfg = ModelConfig.from_dict(resolved["model"])
    weights = init_model(model_cfg, seed=t["seed"])
    cfg = TrainConfig(**t)
    loss_cfg = LossConfig.for_model(model_cfg, **resolved["loss"])
    result = train(
        weights,
        _training_stream(resolved, args.stage),
        cfg,
        loss_cfg,
        checkpoint_dir=out / "checkpoints",
        log_path=out / "loss.log",
        resume=args.resume,
    )
    final = out / "model.m3d"
    if args.merge and result.checkpoints:
        paths = last_checkpoints(out / "checkpoints", cfg.merge_window)
        save_model(merge_weights([load_model(p) for p in paths]), final)
        resolved["merged_checkpoints"] = [p.name for p in paths]
    else:
        save_model(result.weights, final)
    resolved["resume"] = str(args.resume) if args.resume else None
    write_sidecar(final, resolved)
    last = result.history[-1] if result.history else None
    print(f"steps\t{len(result.history)}")
    if last:
        print(f"final_loss\t{last['loss']:.6f}")
    print(f"model\t{final}")


def cmd_eval(args, resolved):
    e = resolved["eval"]
    _set(e, "depths", _ints(args.depths))
    _set(e, "dims", _ints(args.dims))
    _set(e, "ranks", _ints(args.ranks))
    _set(e, "rank_mode", args.rank_mode)
    weights = load_model(args.model)
    if args.tasks:
        tasks = [task_from_samples(list(load_jsonl(p)), Path(p).stem) for p in args.tasks]
    else:
        tasks = [generate_synthetic_task(SynthTaskSpec(**e["synthetic"]))]
    report = run_sweep(weights, tasks, e["depths"], e["dims"], e["ranks"], e["rank_mode"], e["k"])
    print(report.to_table())
    if args.out:
        report.save(args.out)
        write_sidecar(args.out, resolved)


def cmd_embed(args, resolved):
    weights = load_model(args.model)
    texts = _read_texts(args.input)
    vecs = embed(weights, texts, depth=args.depth, dim=args.dim, rank=args.rank)
    with open(args.out, "wb") as fh:
        np.save(fh, vecs)
    resolved["embed"] = {"model": str(args.model), "input": str(args.input),
                         "depth": args.depth, "dim": args.dim, "rank": args.rank}
    write_sidecar(args.out, resolved)
    print(f"embeddings\t{vecs.shape[0]}x{vecs.shape[1]}\t{args.out}")


def cmd_prune_layers(args, resolved):
    if args.manifest_only:
        set_num_hidden_layers(args.input, args.layers, args.out)
    else:
        save_model(load_model(args.input).pruned(args.layers), args.out)
    resolved["prune"] = {"input": str(args.input), "layers": args.layers, "manifest_only": args.manifest_only}
    write_sidecar(args.out, resolved)
    print(f"layers\t{args.layers}\t{args.out}")


def cmd_compress_embedding(args, resolved):
    if (args.rank is None) == (not args.compat):
        raise UsageError("give exactly one of --rank or --compat")
    weights = load_model(args.input)
    if args.compat:
        save_model(to_compatibility(weights), args.out, mode="dense")
    else:
        save_model(to_efficiency(weights, args.rank), args.out, mode="factorized")
    resolved["compress"] = {"input": str(args.input), "rank": args.rank, "compat": args.compat}
    write_sidecar(args.out, resolved)
    print(dump_manifest(args.out).splitlines()[1])


def cmd_merge(args, resolved):
    merged = merge_weights([load_model(p) for p in args.paths])
    save_model(merged, args.out)
    resolved["merge"] = {"inputs": [str(p) for p in args.paths]}
    write_sidecar(args.out, resolved)
    print(f"merged\t{len(args.paths)}\t{args.out}")


def cmd_mine(args, resolved):
    weights = load_model(args.model)
    corpus = _read_texts(args.corpus)
    samples = list(load_jsonl(args.queries))
    negs = mine_hard_negatives(weights, corpus, [s.query for s in samples], [s.positive for s in samples], args.k)
    mined = [
        Sample(s.query, s.positive, tuple(n), s.format, s.instruction, s.source) for s, n in zip(samples, negs)
    ]
    write_jsonl(mined, args.out)
    resolved["mine"] = {"model": str(args.model), "corpus": str(args.corpus), "queries": str(args.queries),
                        "k": args.k}
    write_sidecar(args.out, resolved)
    print(f"samples\t{len(mined)}\t{args.out}")


def cmd_bench(args, resolved):
    b = resolved["bench"]
    for key in ("batch_size", "seq_len", "iterations", "trials", "warmups"):
        _set(b, key, getattr(args, key))
    _set(b, "depths", _ints(args.depths))
    if args.ranks is not None:
        b["ranks"] = [None] + _ints(args.ranks)
    workload = Workload(**{f.name: b[f.name] for f in fields(Workload)})
    weights = load_model(args.model)
    results = run_bench(weights, b["depths"], workload, b["ranks"])
    print(format_table(results))
    if args.out:
        save_results(results, args.out, workload)
        write_sidecar(args.out, resolved)


def cmd_dump_manifest(args, resolved):
    if args.json:
        print(json.dumps(read_manifest(args.path), indent=1))
    else:
        print(dump_manifest(args.path))


def cmd_synth_data(args, resolved):
    spec = SynthTaskSpec(**resolved["data"]["synthetic"])
    task = generate_synthetic_task(spec)
    stream = task.training_samples(seed=resolved["data"]["seed"] + 1, n_hard=resolved["loss"]["n_hard_negatives"])
    write_jsonl((next(stream) for _ in range(args.n)), args.out)
    write_sidecar(args.out, resolved)
    print(f"samples\t{args.n}\t{args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="m3d", description="Layer/dimension/rank nested text embedders.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="JSON run config (sections: model, loss, train, data, eval, bench)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--stage", type=int, choices=(1, 2), default=1)
    s.add_argument("--resume")
    s.add_argument("--data", nargs="*", help="JSONL sources; defaults to the synthetic task")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--checkpoint-interval", type=int)
    s.add_argument("--merge", action="store_true", help="final model = mean of the last checkpoints")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="NDCG@10 sweep over depth x dim x rank")
    s.add_argument("model")
    s.add_argument("--tasks", nargs="*", help="JSONL retrieval files; defaults to the synthetic task")
    s.add_argument("--depths")
    s.add_argument("--dims")
    s.add_argument("--ranks")
    s.add_argument("--rank-mode", choices=("svd", "columns"))
    s.add_argument("--out", help="structured report (plot data)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("embed", help="embed one text per line")
    s.add_argument("model")
    s.add_argument("input")
    s.add_argument("--out", required=True, help=".npy output")
    s.add_argument("--depth", type=int)
    s.add_argument("--dim", type=int)
    s.add_argument("--rank", type=int)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("prune-layers", help="keep the first L transformer blocks")
    s.add_argument("input")
    s.add_argument("out")
    s.add_argument("--layers", type=int, required=True)
    s.add_argument("--manifest-only", action="store_true", help="edit num_hidden_layers, keep the payload")
    s.set_defaults(func=cmd_prune_layers)

    s = sub.add_parser("compress-embedding", help="re-factorize or densify the embedding")
    s.add_argument("input")
    s.add_argument("out")
    s.add_argument("--rank", type=int)
    s.add_argument("--compat", action="store_true")
    s.set_defaults(func=cmd_compress_embedding)

    s = sub.add_parser("merge-checkpoints", help="elementwise mean of checkpoints")
    s.add_argument("paths", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("mine-negatives", help="self-mine hard negatives")
    s.add_argument("model")
    s.add_argument("corpus")
    s.add_argument("queries", help="JSONL samples whose positives are in the corpus")
    s.add_argument("--k", type=int, default=7)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mine)

    s = sub.add_parser("bench", help="throughput per depth")
    s.add_argument("model")
    s.add_argument("--depths")
    s.add_argument("--ranks")
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seq-len", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--trials", type=int)
    s.add_argument("--warmups", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("dump-manifest", help="print a checkpoint's manifest")
    s.add_argument("path")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_dump_manifest)

    s = sub.add_parser("synth-data", help="write synthetic retrieval samples as JSONL")
    s.add_argument("--n", type=int, default=256)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        resolved = load_config(args.config)
        resolved["command"] = args.command
        args.func(args, resolved)
    except Matryoshka3DError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: no such file", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
