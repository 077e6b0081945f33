from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

A = TypeVar("A")
R = TypeVar("R")


def map_ordered(fn: Callable[[A], R], items: Iterable[A], workers: int = 1) -> list[R]:
    """
    Apply ``fn`` to every item, in a process pool when ``workers`` > 1.

    Results come back in input order, so output is identical to the serial run.
    ``fn`` and the items must be picklable when a pool is used.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, items))
