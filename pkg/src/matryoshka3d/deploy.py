"""Checkpoint container plus the deployment transforms.

Container layout (all integers little-endian)::

    8 bytes   magic  b"M3DCKPT\\n"
    8 bytes   uint64 manifest length N
    N bytes   UTF-8 JSON manifest
    ...       payload: raw row-major tensors in manifest order

Each manifest tensor entry carries ``name``, ``dtype`` (``<f4``/``<f8``),
``shape``, ``offset`` (relative to the payload start) and ``length`` in
bytes. Entries must tile the payload exactly. ``config.num_hidden_layers``
may be lowered below ``stored_layers``; loading then skips the extra
blocks without reading them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericalError, ParameterError, UsageError
from .model import (
    LAYER_TENSORS,
    DenseEmbedding,
    FactorizedEmbedding,
    ModelConfig,
    ModelWeights,
    factorize_embedding,
)
from .tensor import Tensor

MAGIC = b"M3DCKPT\n"
FORMAT_VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def embedding_parameter_count(vocab_size: int, d_model: int, rank: int | None = None) -> int:
    """``v*d`` for a dense table, ``v*r + r*d`` for a factorized one."""
    if rank is None:
        return vocab_size * d_model
    return vocab_size * rank + rank * d_model


def layer_parameter_count(config: ModelConfig) -> int:
    d, f = config.d_model, config.d_ff
    return 4 * d * d + 3 * d * f + 2 * d


def model_parameter_count(config: ModelConfig, n_layers: int | None = None, rank: int | None = -1) -> int:
    n = config.n_layers if n_layers is None else n_layers
    r = config.mel_rank if rank == -1 else rank
    return (
        embedding_parameter_count(config.vocab_size, config.d_model, r)
        + n * layer_parameter_count(config)
        + config.d_model
    )


def tensor_count(config: ModelConfig) -> int:
    return (2 if config.factorized else 1) + len(LAYER_TENSORS) * config.n_layers + 1


# embedding modes


def materialize_compatibility(emb: FactorizedEmbedding) -> Tensor:
    """Dense table ``A @ B`` for deployment as a standard embedding."""
    return Tensor(emb.A.data @ emb.B.data)


def refactorize(E, rank: int) -> FactorizedEmbedding:
    """Re-factorize a dense table at ``rank`` via truncated SVD."""
    E = E.data if isinstance(E, Tensor) else np.asarray(E)
    fe = factorize_embedding(E, rank)
    return FactorizedEmbedding(Tensor(fe.A.data.astype(E.dtype)), Tensor(fe.B.data.astype(E.dtype)))


def dense_table(weights: ModelWeights) -> Tensor:
    emb = weights.embedding
    return emb.E if isinstance(emb, DenseEmbedding) else materialize_compatibility(emb)


def to_compatibility(weights: ModelWeights) -> ModelWeights:
    return ModelWeights(
        weights.config.with_rank(None),
        DenseEmbedding(dense_table(weights)),
        weights.layers,
        weights.final_norm,
    )


def to_efficiency(weights: ModelWeights, rank: int | None = None) -> ModelWeights:
    """Factorized deployment: the trained factors as-is, or re-factorized at ``rank``."""
    emb = weights.embedding
    if rank is None:
        if not isinstance(emb, FactorizedEmbedding):
            raise UsageError("a dense model needs an explicit rank to factorize")
        return weights
    new = refactorize(dense_table(weights), rank)
    return ModelWeights(weights.config.with_rank(rank), new, weights.layers, weights.final_norm)


def truncate_dims(vectors, dim: int) -> np.ndarray:
    """Keep the first ``dim`` coordinates and renormalize each row."""
    v = np.atleast_2d(np.asarray(vectors))
    if not 1 <= dim <= v.shape[-1]:
        raise ParameterError(f"dim {dim} outside [1, {v.shape[-1]}]")
    out = v[..., :dim]
    norms = np.linalg.norm(out, axis=-1, keepdims=True)
    if (norms == 0).any():
        raise NumericalError("zero-norm vector after truncation")
    out = out / norms
    return out if np.ndim(vectors) > 1 else out[0]


# container


@dataclass
class Checkpoint:
    weights: ModelWeights
    manifest: dict
    extra_tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def extra(self) -> dict:
        return self.manifest.get("extra", {})


def _le(arr: np.ndarray) -> np.ndarray:
    if arr.dtype not in (np.float32, np.float64):
        raise FormatError(f"unsupported dtype {arr.dtype}")
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def save_model(
    weights: ModelWeights,
    path,
    mode: str | None = None,
    extra: dict | None = None,
    extra_tensors: dict[str, np.ndarray] | None = None,
) -> dict:
    """Write a container; returns its manifest.

    ``mode`` is ``"dense"`` (compatibility, stores ``A @ B``) or
    ``"factorized"``; it defaults to the model's own embedding type.
    """
    native = "factorized" if isinstance(weights.embedding, FactorizedEmbedding) else "dense"
    mode = mode or native
    if mode == "dense":
        weights = to_compatibility(weights) if native == "factorized" else weights
    elif mode == "factorized":
        if native == "dense":
            raise UsageError("dense model: re-factorize with a rank before a factorized save")
    else:
        raise UsageError(f"unknown embedding mode {mode!r}")

    arrays: list[tuple[str, np.ndarray]] = []
    for name, t in weights.named_parameters().items():
        if not np.isfinite(t.data).all():
            raise NumericalError(f"tensor {name} has non-finite values")
        arrays.append((name, _le(t.data)))
    for name, arr in (extra_tensors or {}).items():
        arrays.append((name, _le(np.asarray(arr))))

    table, offset = [], 0
    for name, arr in arrays:
        table.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "length": arr.nbytes}
        )
        offset += arr.nbytes
    cfg = weights.config
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "stored_layers": cfg.n_layers,
        "embedding_mode": mode,
        "stored_rank": cfg.mel_rank if mode == "factorized" else None,
        "parameter_counts": {
            "embedding": embedding_parameter_count(cfg.vocab_size, cfg.d_model, cfg.mel_rank),
            "embedding_dense_equivalent": embedding_parameter_count(cfg.vocab_size, cfg.d_model),
            "total": weights.parameter_count(),
        },
        "tensors": table,
    }
    if extra:
        manifest["extra"] = extra
    _write(path, manifest, (arr for _, arr in arrays))
    return manifest


def _write(path, manifest: dict, arrays):
    header = json.dumps(manifest, indent=1, sort_keys=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in arrays:
            fh.write(arr.tobytes(order="C"))


def _read_header(fh, path) -> tuple[dict, int]:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint container (bad magic)")
    raw = fh.read(8)
    if len(raw) != 8:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw)
    body = fh.read(n)
    if len(body) != n:
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: manifest is not valid JSON ({exc})") from None
    return manifest, len(MAGIC) + 8 + n


def _validate(manifest: dict, payload_size: int, path):
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {manifest.get('format_version')!r}")
    expected = 0
    for entry in manifest.get("tensors", []):
        dtype = _DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise FormatError(f"{path}: tensor {entry.get('name')} has unsupported dtype")
        size = int(np.prod(entry["shape"], dtype=np.int64)) * dtype.itemsize
        if entry["offset"] != expected:
            raise FormatError(f"{path}: tensor {entry['name']} offset {entry['offset']} != {expected}")
        if entry["length"] != size:
            raise FormatError(f"{path}: tensor {entry['name']} length does not match its shape")
        expected += size
    if expected != payload_size:
        raise FormatError(f"{path}: payload is {payload_size} bytes, manifest covers {expected}")
    cfg = manifest.get("config", {})
    if cfg.get("num_hidden_layers", 0) > manifest.get("stored_layers", -1):
        raise FormatError(f"{path}: num_hidden_layers exceeds stored layer blocks")


def read_manifest(path) -> dict:
    path = Path(path)
    with path.open("rb") as fh:
        manifest, start = _read_header(fh, path)
    _validate(manifest, path.stat().st_size - start, path)
    return manifest


def _layer_index(name: str) -> int | None:
    if name.startswith("layers."):
        return int(name.split(".")[1])
    return None


def load_checkpoint(path) -> Checkpoint:
    """Load weights honoring ``num_hidden_layers``, plus any extra tensors."""
    path = Path(path)
    with path.open("rb") as fh:
        manifest, start = _read_header(fh, path)
        _validate(manifest, path.stat().st_size - start, path)
        cfg_dict = dict(manifest["config"])
        n_layers = int(cfg_dict["num_hidden_layers"])
        cfg_dict["mll_layers"] = sorted({l for l in cfg_dict["mll_layers"] if l <= n_layers} | {n_layers})
        try:
            config = ModelConfig.from_dict(cfg_dict)
        except (TypeError, ParameterError) as exc:
            raise FormatError(f"{path}: invalid config ({exc})") from None
        params, extra_tensors = {}, {}
        for entry in manifest["tensors"]:
            name = entry["name"]
            layer = _layer_index(name)
            if layer is not None and layer >= n_layers:
                continue
            fh.seek(start + entry["offset"])
            raw = fh.read(entry["length"])
            arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
            arr = arr.astype(arr.dtype.newbyteorder("="), copy=True)
            if name.startswith(("embed.", "layers.", "final_norm")):
                params[name] = Tensor(arr)
            else:
                extra_tensors[name] = arr
    try:
        weights = ModelWeights.from_named(config, params)
    except KeyError as exc:
        raise FormatError(f"{path}: missing tensor {exc}") from None
    mode = manifest.get("embedding_mode")
    if (mode == "dense") != isinstance(weights.embedding, DenseEmbedding):
        raise FormatError(f"{path}: embedding_mode {mode!r} does not match stored tensors")
    return Checkpoint(weights, manifest, extra_tensors)


def load_model(path) -> ModelWeights:
    return load_checkpoint(path).weights


def rewrite_manifest(path, out_path=None, **config_updates):
    """Edit config fields in a container's manifest, keeping the payload."""
    path = Path(path)
    with path.open("rb") as fh:
        manifest, start = _read_header(fh, path)
        payload = fh.read()
    _validate(manifest, len(payload), path)
    manifest["config"].update(config_updates)
    _validate(manifest, len(payload), path)
    header = json.dumps(manifest, indent=1).encode("utf-8")
    with open(out_path or path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)


def set_num_hidden_layers(path, n_layers: int, out_path=None):
    rewrite_manifest(path, out_path, num_hidden_layers=int(n_layers))


def prune_layers(weights: ModelWeights, n_layers: int) -> ModelWeights:
    return weights.pruned(n_layers)


def dump_manifest(path) -> str:
    """Human-readable summary of a container's manifest."""
    m = read_manifest(path)
    cfg = m["config"]
    lines = [
        f"format_version     {m['format_version']}",
        f"embedding_mode     {m['embedding_mode']}",
        f"stored_rank        {m['stored_rank']}",
        f"num_hidden_layers  {cfg['num_hidden_layers']}",
        f"stored_layers      {m['stored_layers']}",
        f"vocab_size         {cfg['vocab_size']}",
        f"d_model            {cfg['d_model']}",
    ]
    for k, v in m.get("parameter_counts", {}).items():
        lines.append(f"params.{k:<20} {v}")
    lines.append(f"tensors            {len(m['tensors'])}")
    lines.append(f"{'name':<24} {'dtype':<5} {'shape':<14} {'offset':>10} {'length':>10}")
    for e in m["tensors"]:
        shape = "x".join(str(s) for s in e["shape"])
        lines.append(f"{e['name']:<24} {e['dtype']:<5} {shape:<14} {e['offset']:>10} {e['length']:>10}")
    return "\n".join(lines)


def merge_weights(models: list[ModelWeights]) -> ModelWeights:
    """Elementwise mean of weight tensors; all models must share one config."""
    if not models:
        raise UsageError("nothing to merge")
    first = models[0]
    names = list(first.named_parameters())
    for m in models[1:]:
        if m.config != first.config or list(m.named_parameters()) != names:
            raise UsageError("cannot merge checkpoints with different configs")
    merged = {}
    for name in names:
        stack = [m.named_parameters()[name].data for m in models]
        # shifted form: identical inputs come back bit-for-bit
        base = stack[0].astype(np.float64)
        delta = np.zeros_like(base)
        for a in stack[1:]:
            delta += a.astype(np.float64) - base
        merged[name] = Tensor((base + delta / len(stack)).astype(stack[0].dtype))
    return ModelWeights.from_named(first.config, merged)

