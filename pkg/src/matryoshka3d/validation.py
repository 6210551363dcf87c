"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

from collections.abc import Iterable, Mapping

import numpy as np

from .data import RETRIEVAL, Sample, _record_to_sample
from .errors import DataError, ParameterError, UsageError


def check_texts(texts) -> list[str]:
    """Accept a string sequence or a 1-D array of strings."""
    if isinstance(texts, str):
        raise DataError("expected a sequence of texts, got a single string")
    if isinstance(texts, np.ndarray):
        if texts.ndim != 1:
            raise DataError(f"expected a 1-D array of texts, got shape {texts.shape}")
        texts = texts.tolist()
    texts = list(texts)
    for i, t in enumerate(texts):
        if not isinstance(t, str):
            raise DataError(f"item {i} is {type(t).__name__}, not str")
    return texts


def check_samples(samples) -> list[Sample]:
    """Coerce Samples, JSON-style dicts or ``(query, positive, negatives)`` tuples."""
    if isinstance(samples, (str, bytes)) or not isinstance(samples, Iterable):
        raise DataError("training data must be an iterable of samples")
    out = []
    for i, s in enumerate(samples, start=1):
        if isinstance(s, Sample):
            out.append(s)
        elif isinstance(s, Mapping):
            out.append(_record_to_sample({"format": RETRIEVAL, **s}, i, ""))
        elif isinstance(s, tuple) and len(s) in (2, 3):
            negs = tuple(s[2]) if len(s) == 3 else ()
            out.append(Sample(s[0], s[1], negs, line=i))
        else:
            raise DataError(f"cannot interpret {type(s).__name__} as a sample", i)
    if not out:
        raise DataError("no training samples")
    return out


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise ParameterError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_in_range(value, name: str, low: int, high: int) -> int:
    value = check_positive_int(value, name)
    if not low <= value <= high:
        raise ParameterError(f"{name}={value} outside [{low}, {high}]")
    return value


def check_choice(value, name: str, choices):
    if value not in choices:
        raise UsageError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def check_int_list(values, name: str) -> tuple[int, ...]:
    if isinstance(values, str):
        values = [v for v in values.split(",") if v.strip()]
    try:
        return tuple(int(v) for v in values)
    except (TypeError, ValueError):
        raise UsageError(f"{name} must be a list of integers, got {values!r}") from None
