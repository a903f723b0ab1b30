"""Thread-pool and determinism switches.

This module must be imported before numba so it can size the thread pool.
numba fixes NUMBA_NUM_THREADS at first import and set_num_threads can only
shrink below that, so we seed the pool to at least 8 workers; benchmarks can
then request thread counts up to max_threads() even on narrow machines
(oversubscribed threads obviously yield no speedup there).

Determinism is a process-global mode (default on): grid scatters run in fixed
particle order, bit-reproducible at any thread count. Fast mode scatters into
per-thread buffers and reduces in thread order, which reorders floating-point
accumulation (~1e-10 relative wobble vs deterministic on typical scenes).
"""

import os

ENV_THREADS = "MORPHMPM_THREADS"

_pool = max(os.cpu_count() or 1, 8)
os.environ.setdefault("NUMBA_NUM_THREADS", str(_pool))

import numba  # noqa: E402  (must come after the env seed)

_deterministic = True


def max_threads():
    """Size of the numba worker pool (upper bound for set_threads)."""
    return int(numba.config.NUMBA_NUM_THREADS)


def set_threads(n):
    """Set the active worker count, clamped to [1, max_threads()]."""
    n = max(1, min(int(n), max_threads()))
    numba.set_num_threads(n)
    return n


def get_threads():
    return int(numba.get_num_threads())


def set_deterministic(flag):
    global _deterministic
    _deterministic = bool(flag)


def deterministic():
    return _deterministic


def threads_from_env(default=None):
    """Resolve a thread count from the environment (used only when no
    explicit --threads flag is given)."""
    raw = os.environ.get(ENV_THREADS)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        return default
