"""Small argument checks used at public entry points."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .errors import DomainError


def check_positive(value, name):
    value = float(value)
    if not math.isfinite(value) or value <= 0:
        raise DomainError(f"{name} must be positive and finite, got {value!r}")
    return value


def check_nonnegative(value, name):
    value = float(value)
    if not math.isfinite(value) or value < 0:
        raise DomainError(f"{name} must be non-negative and finite, got {value!r}")
    return value


def check_probability(value, name):
    value = float(value)
    if not (0.0 <= value <= 1.0):
        raise DomainError(f"{name} must lie in [0, 1], got {value!r}")
    return value


def check_array_1d(values, name, *, min_length=1):
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise DomainError(f"{name} must be one-dimensional")
    if arr.size < min_length:
        raise DomainError(f"{name} needs at least {min_length} entries, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


def check_increasing(values, name):
    arr = check_array_1d(values, name)
    if np.any(np.diff(arr) <= 0):
        raise DomainError(f"{name} must be strictly increasing")
    return arr


def is_existing_file(source) -> bool:
    """True when ``source`` names an existing file rather than holding inline text."""
    if isinstance(source, Path):
        return source.is_file()
    if not isinstance(source, str) or "\n" in source or source.lstrip()[:1] in ("{", "[") or len(source) > 4096:
        return False
    return Path(source).is_file()
