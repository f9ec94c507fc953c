"""Thread pool for independent replicates."""

import logging
import queue
import threading
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Optional, TypeVar

from .errors import InvalidInputError

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


@dataclass
class ReplicateTask:
    """One item of a map call, tagged with its position."""
    index: int
    item: Any


class ReplicatePool:
    """Runs a function over items on worker threads, results in item order.

    Every replicate owns its random stream, so results do not depend on which
    worker ran which item or in what order they finished.
    """

    def __init__(self, workers: int = 1):
        if workers < 1:
            raise InvalidInputError(f"workers must be >= 1, got {workers}")
        self._workers = workers
        self._lock = threading.Lock()

    @property
    def workers(self) -> int:
        return self._workers

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
        """Apply fn to every item.

        The first failure (lowest item index) is re-raised in the caller after
        all workers have stopped.
        """
        items = list(items)
        if self._workers == 1 or len(items) <= 1:
            return [fn(item) for item in items]

        tasks: queue.Queue[ReplicateTask | None] = queue.Queue()
        for index, item in enumerate(items):
            tasks.put(ReplicateTask(index, item))
        n_threads = min(self._workers, len(items))
        for _ in range(n_threads):
            tasks.put(None)  # One exit signal per worker

        results: list[Optional[R]] = [None] * len(items)
        errors: list[tuple[int, BaseException]] = []
        threads = [
            threading.Thread(
                target=self._process_tasks,
                args=(fn, tasks, results, errors),
                daemon=True,
            )
            for _ in range(n_threads)
        ]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()

        if errors:
            index, exc = min(errors, key=lambda pair: pair[0])
            logger.debug("replicate %d failed: %s", index, exc)
            raise exc
        return results  # type: ignore[return-value]

    def _process_tasks(
        self,
        fn: Callable[[Any], Any],
        tasks: "queue.Queue[ReplicateTask | None]",
        results: list,
        errors: list,
    ) -> None:
        """Worker loop: drain tasks until the exit signal."""
        while True:
            task = tasks.get()
            if task is None:
                break
            try:
                results[task.index] = fn(task.item)
            except Exception as exc:
                with self._lock:
                    errors.append((task.index, exc))
