"""Process-pool fan-out with results kept in input order."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

THREADS_ENV = "FMFLCM_THREADS"


def resolve_threads(threads: int | None = None) -> int:
    """Worker count from the argument, else the environment, else 1."""
    if threads is None:
        raw = os.environ.get(THREADS_ENV, "").strip()
        threads = int(raw) if raw else 1
    if threads < 1:
        raise ValueError("thread count must be positive")
    return threads


def parallel_map(fn, items, threads: int | None = 1) -> list:
    items = list(items)
    threads = resolve_threads(threads)
    if threads == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))
