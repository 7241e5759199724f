"""Shared worker pool for independent analysis jobs.

Results come back in submission order regardless of completion order, so
parallel runs merge deterministically. numpy releases the GIL inside BLAS,
which is where these jobs spend their time.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor


def parallel_map(fn, items, threads: int = 1) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
