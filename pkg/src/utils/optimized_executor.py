# src/utils/optimized_executor.py
"""
Thread-pool helpers for occlupose.
Sample generation is embarrassingly parallel and augmentation can run ahead
of the optimizer loop; both hand results back in submission order so
parallel and serial runs stay identical.
"""
import os
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from typing import Callable, Deque, Dict, Iterable, Iterator, List, Optional, TypeVar

T = TypeVar("T")
R = TypeVar("R")

MODE_CONFIGS: Dict[str, Dict[str, int]] = {
    "smoke": {"generation_workers": 2, "prefetch_depth": 2},
    "reference": {"generation_workers": 8, "prefetch_depth": 4},
}


def default_workers() -> int:
    return max(1, min(8, (os.cpu_count() or 1)))


def map_ordered(fn: Callable[[T], R], items: Iterable[T], workers: Optional[int] = None) -> List[R]:
    """Apply ``fn`` across a pool; results come back in input order."""
    items = list(items)
    workers = workers or default_workers()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


class Prefetcher:
    """
    Runs ``produce(step)`` up to ``depth`` steps ahead on a worker thread and
    yields the results strictly in step order.
    """

    def __init__(self, produce: Callable[[int], R], steps: Iterable[int], depth: int = 2):
        self.produce = produce
        self.steps = iter(steps)
        self.depth = max(1, depth)
        self._pool = ThreadPoolExecutor(max_workers=1)
        self._pending: Deque[Future] = deque()

    def _fill(self) -> None:
        while len(self._pending) < self.depth:
            try:
                step = next(self.steps)
            except StopIteration:
                return
            self._pending.append(self._pool.submit(self.produce, step))

    def __iter__(self) -> Iterator[R]:
        try:
            self._fill()
            while self._pending:
                result = self._pending.popleft().result()
                self._fill()
                yield result
        finally:
            self.close()

    def close(self) -> None:
        for future in self._pending:
            future.cancel()
        self._pending.clear()
        self._pool.shutdown(wait=True)
