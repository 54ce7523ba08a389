"""Process-level performance knobs for long training runs.

Training allocates hundreds of multi-megabyte arrays per iteration, which by
default glibc serves with mmap/munmap; the page-fault churn is a ~5-50x
slowdown. Raising the mmap/trim thresholds keeps those blocks on the heap for
reuse. No-op off Linux/glibc.
"""

from __future__ import annotations

import ctypes

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3

_done = False


def tune_allocator(threshold_bytes: int = 1 << 30) -> bool:
    """Keep large allocations on the reusable heap; idempotent."""
    global _done
    if _done:
        return True
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        ok = bool(libc.mallopt(_M_MMAP_THRESHOLD, threshold_bytes))
        ok = bool(libc.mallopt(_M_TRIM_THRESHOLD, threshold_bytes)) and ok
        _done = ok
        return ok
    except OSError:
        return False
