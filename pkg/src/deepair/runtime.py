"""Worker-pool sizing for the numeric backends."""

from __future__ import annotations

import os

from threadpoolctl import threadpool_limits

from .errors import ConfigError

THREADS_ENV = "DEEPAIR_THREADS"


def worker_count(deterministic=False):
    """Threads to use: 1 in deterministic mode, else ``DEEPAIR_THREADS`` or the core count."""
    if deterministic:
        return 1
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {n}")
    return n


def limit_threads(deterministic=False):
    """Context manager capping BLAS/OpenMP pools at :func:`worker_count`."""
    return threadpool_limits(limits=worker_count(deterministic))
