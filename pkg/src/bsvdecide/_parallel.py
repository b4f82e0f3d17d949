"""Worker-count setting shared by the parallel sections of the pipeline.

Parallel sections split work into fixed per-item slots, so the number of
workers never changes the numerical result.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

_THREADS = 1


def set_threads(n: int) -> None:
    global _THREADS
    if int(n) < 1:
        raise ValueError("thread count must be >= 1")
    _THREADS = int(n)


def get_threads() -> int:
    return _THREADS


def run_chunked(fn, n_items: int, n_workers: int | None = None, min_chunk: int = 256) -> None:
    """Call ``fn(start, stop)`` over contiguous index chunks of ``range(n_items)``."""
    workers = get_threads() if n_workers is None else int(n_workers)
    if workers <= 1 or n_items <= min_chunk:
        fn(0, n_items)
        return
    n_chunks = min(workers * 4, max(1, n_items // min_chunk))
    bounds = [n_items * i // n_chunks for i in range(n_chunks + 1)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
        for fut in futures:
            fut.result()
