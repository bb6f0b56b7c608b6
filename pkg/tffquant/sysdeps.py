"""
Settings read from the host environment. The only knob is ``FQ_THREADS``,
which caps the number of worker threads used for embarrassingly parallel
work (Monte Carlo trials, per-layer serialization).
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor

from tffquant.errors import ConfigError

LOG = logging.getLogger(__name__)

_DEFAULT_MAX_WORKERS = 4


def worker_count():
    """
    Number of worker threads to use.

    :rtype: int
    :returns: ``FQ_THREADS`` when set, otherwise ``min(4, cpu_count)``.
    """
    value = os.environ.get("FQ_THREADS")
    if value is None or value.strip() == "":
        return max(1, min(_DEFAULT_MAX_WORKERS, os.cpu_count() or 1))
    try:
        count = int(value)
    except ValueError as exc:
        raise ConfigError(f"FQ_THREADS must be an integer, got {value!r}") from exc
    if count < 1:
        raise ConfigError(f"FQ_THREADS must be positive, got {count}")
    return count


def parallel_map(func, items):
    """
    Apply ``func`` to every item, preserving order. Results never depend on
    the worker count: each item must carry everything it needs (including
    its own random stream).

    :param function func: Callable taking one item.
    :param iterable items: Work items.
    :rtype: list
    :returns: ``[func(item) for item in items]``
    """
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [func(item) for item in items]
    LOG.debug("parallel_map: %d items on %d threads", len(items), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))
