"""Counter-based random streams.

Paths are grouped in fixed blocks of ``BLOCK`` consecutive indices. Block ``b``
draws from a Philox generator keyed by ``(seed, b)``; every round of draws
produces a full block-sized array, so the numbers seen by path ``p`` depend only
on ``(seed, p, round)``. A path therefore has the same trajectory whatever the
batch size, the block processing order, or the number of worker threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

import numpy as np

BLOCK = 2048

T = TypeVar("T")


def block_generator(seed: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(block),))
    return np.random.Generator(np.random.Philox(ss))


def blocks(start: int, n: int) -> list[tuple[int, int, int]]:
    """Split path indices ``[start, start + n)`` into ``(block, lo, hi)`` slices.

    ``lo``/``hi`` are offsets inside the block.
    """
    out = []
    p = start
    end = start + n
    while p < end:
        b = p // BLOCK
        lo = p - b * BLOCK
        hi = min(BLOCK, end - b * BLOCK)
        out.append((b, lo, hi))
        p = b * BLOCK + hi
    return out


def thread_count() -> int:
    raw = os.environ.get("SOLVER_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def ordered_map(fn: Callable[..., T], items: Iterable, threads: int | None = None) -> list[T]:
    """Map ``fn`` over ``items`` and return results in input order."""
    items = list(items)
    threads = thread_count() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
