"""Ordered map over worker processes.

Workers are forked, so the mapped function may be any closure; only its
results cross process boundaries. Output order always follows input order,
which keeps reports identical for every worker count.
"""

from __future__ import annotations

import multiprocessing
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

_JOB: Callable | None = None


def _call(item):
    return _JOB(item)


def ordered_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """``[fn(x) for x in items]``, spread over ``threads`` processes when above 1."""
    global _JOB
    if threads < 1:
        raise ValueError("threads must be at least 1")
    items = list(items)
    if threads == 1 or len(items) < 2 or "fork" not in multiprocessing.get_all_start_methods():
        return [fn(x) for x in items]
    _JOB = fn
    try:
        with multiprocessing.get_context("fork").Pool(min(threads, len(items))) as pool:
            return pool.map(_call, items, chunksize=1)
    finally:
        _JOB = None
