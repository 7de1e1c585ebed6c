"""Deterministic fan-out helper.

Results are assembled in submission order, so the worker count changes
speed only, never output. Each task must own its randomness (substreams).
"""

from concurrent.futures import ThreadPoolExecutor
import os


def indexed_thread_map(fn, items, threads: int = 1):
    """[fn(item) for item in items], optionally on a thread pool."""
    items = list(items)
    if threads == 0:
        threads = os.cpu_count() or 1
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
