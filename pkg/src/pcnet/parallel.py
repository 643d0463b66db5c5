"""Deterministic data-parallel evaluation over fixed-size batches.

Batch boundaries depend only on the dataset length and batch size, never on
the worker count, and results come back in batch order, so any reduction
over them is bit-identical whether run on 1 thread or many.  Threads are
enough here: the heavy lifting happens inside numpy, which releases the GIL.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count(requested: int | None = None) -> int:
    """Requested count, else PCNET_THREADS, else the available cores."""
    if requested is not None and requested >= 1:
        return requested
    env = os.environ.get("PCNET_THREADS")
    if env:
        try:
            n = int(env)
            if n >= 1:
                return n
        except ValueError:
            pass
    return os.cpu_count() or 1


def map_batches(job, total: int, batch_size: int, workers: int | None = None) -> list:
    """Run ``job(lo, hi)`` over [0, total) in fixed batches; ordered results."""
    bounds = [(lo, min(lo + batch_size, total)) for lo in range(0, total, batch_size)]
    n = min(worker_count(workers), len(bounds)) or 1
    if n == 1:
        return [job(lo, hi) for lo, hi in bounds]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(lambda b: job(*b), bounds))
