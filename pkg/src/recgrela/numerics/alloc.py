"""Instrumented buffer accounting for deterministic memory measurements.

Benchmarks need a reproducible "peak working set" number that does not
depend on OS paging or allocator reuse.  Every numeric buffer the engine
creates is registered here; inside a ``track()`` block the tracker follows
live bytes (releases are observed through weakref finalizers, which fire
promptly under CPython refcounting) and records the peak above the entry
baseline.
"""

import threading
import weakref

import numpy as np

_lock = threading.Lock()
_enabled = False
_live_bytes = 0
_peak_bytes = 0


def _release(nbytes: int) -> None:
    global _live_bytes
    with _lock:
        _live_bytes -= nbytes


def register(arr: np.ndarray) -> np.ndarray:
    """Account for ``arr`` while tracking is active. Returns ``arr``."""
    global _live_bytes, _peak_bytes
    if _enabled:
        nbytes = arr.nbytes
        with _lock:
            _live_bytes += nbytes
            if _live_bytes > _peak_bytes:
                _peak_bytes = _live_bytes
        weakref.finalize(arr, _release, nbytes)
    return arr


def new(shape, dtype=np.float64) -> np.ndarray:
    """Allocate a tracked, uninitialized buffer."""
    return register(np.empty(shape, dtype=dtype))


def zeros(shape, dtype=np.float64) -> np.ndarray:
    return register(np.zeros(shape, dtype=dtype))


class track:
    """Context manager measuring peak tracked bytes above the entry level.

    Only buffers allocated while a ``track`` block is active are counted;
    caller-owned inputs and preallocated outputs stay out of the measurement.
    """

    def __init__(self):
        self.peak_bytes = 0

    def __enter__(self):
        global _enabled, _live_bytes, _peak_bytes
        with _lock:
            self._was_enabled = _enabled
            self._base = _live_bytes
            _enabled = True
            _peak_bytes = _live_bytes
        return self

    def __exit__(self, exc_type, exc, tb):
        global _enabled
        with _lock:
            self.peak_bytes = max(0, _peak_bytes - self._base)
            _enabled = self._was_enabled
        return False
