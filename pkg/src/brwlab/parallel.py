"""Worker pool over independently keyed replica chunks."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get("BRWLAB_WORKERS", "1"))
    return max(1, int(workers))


def map_chunks(fn: Callable, tasks: Sequence, workers: int | None = 1) -> list:
    """Apply ``fn`` to every task and return results in task order.

    Each task carries its own random key, so the output does not depend on
    how tasks are spread over processes.
    """
    workers = resolve_workers(workers)
    if workers == 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def concat_fields(parts: Iterable[dict], keys: Sequence[str]) -> dict:
    import numpy as np

    parts = list(parts)
    return {k: np.concatenate([p[k] for p in parts]) for k in keys}
