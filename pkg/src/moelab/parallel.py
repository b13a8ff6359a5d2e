"""Deterministic worker-sharded execution helpers.

Every parallel operation in the toolkit maps a function over an ordered list
of work items and combines the results in item order, so the combined output
is independent of the worker count (exactly for counts and byte streams,
within float roundoff for sums reduced shard by shard).
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

from .errors import ValidationError

WORKERS_ENV = "MOELAB_WORKERS"

T = TypeVar("T")
R = TypeVar("R")


def resolve_workers(workers: int | None) -> int:
    """Return the effective worker count (argument, else env var, else 1)."""
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers < 1:
        raise ValidationError(f"worker count must be >= 1, got {workers}")
    return workers


def ordered_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    """Map fn over items, preserving item order in the result list."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def shard_slices(n: int, workers: int) -> list[slice]:
    """Split range(n) into at most `workers` contiguous ascending slices."""
    if n <= 0:
        return []
    shards = min(workers, n)
    base, extra = divmod(n, shards)
    slices = []
    start = 0
    for i in range(shards):
        size = base + (1 if i < extra else 0)
        slices.append(slice(start, start + size))
        start += size
    return slices


class EvalCounter:
    """Thread-safe counter for search-evaluation accounting."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._value = 0

    def increment(self) -> None:
        with self._lock:
            self._value += 1

    @property
    def value(self) -> int:
        return self._value
