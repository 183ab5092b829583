"""
Slice-parallel execution helpers
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Tuple

from app.core.config import settings


def split_range(n: int, parts: int) -> List[Tuple[int, int]]:
    """Split [0, n) into at most `parts` contiguous, non-empty slices"""
    parts = max(1, min(parts, n))
    if n <= 0:
        return []
    base, extra = divmod(n, parts)
    slices = []
    start = 0
    for i in range(parts):
        stop = start + base + (1 if i < extra else 0)
        slices.append((start, stop))
        start = stop
    return slices


def map_slices(fn: Callable[[int, int], None], n: int, workers: Optional[int] = None,
               chunk: Optional[int] = None) -> None:
    """Run fn(start, stop) over disjoint slices of [0, n).

    fn must only write into its own slice of preallocated outputs; the
    result is then identical for any worker count.
    """
    workers = settings.WORKERS if workers is None else workers
    if chunk:
        slices = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    else:
        slices = split_range(n, max(1, workers) * 2)
    if workers <= 1 or len(slices) <= 1:
        for start, stop in slices:
            fn(start, stop)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, start, stop) for start, stop in slices]
        for future in futures:
            future.result()
