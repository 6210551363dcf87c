"""Hashed whitespace tokenizer.

Every word maps to ``3 + fnv1a64(word) % (vocab_size - 3)``; ids 0..2 are
reserved for PAD, BOS and EOS.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from .errors import ParameterError

PAD, BOS, EOS = 0, 1, 2
N_SPECIAL = 3

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class VocabSpec:
    vocab_size: int = 4096

    def __post_init__(self):
        if self.vocab_size < 8:
            raise ParameterError(f"vocab_size must be >= 8, got {self.vocab_size}")

    @property
    def n_buckets(self) -> int:
        return self.vocab_size - N_SPECIAL


@lru_cache(maxsize=1 << 16)
def word_id(word: str, vocab_size: int) -> int:
    return N_SPECIAL + fnv1a_64(word.encode("utf-8")) % (vocab_size - N_SPECIAL)


def encode(text: str, spec: VocabSpec, max_len: int) -> list[int]:
    """BOS + hashed words + EOS, keeping the leading words when too long."""
    if max_len < 2:
        raise ParameterError(f"max_len must be >= 2, got {max_len}")
    words = text.split()[: max_len - 2]
    return [BOS] + [word_id(w, spec.vocab_size) for w in words] + [EOS]


def encode_batch(texts, spec: VocabSpec, max_len: int) -> list[list[int]]:
    return [encode(t, spec, max_len) for t in texts]
