"""Process-level tuning for the numpy hot paths."""

import ctypes
import sys

_tuned = False


def tune_allocator():
    """Raise glibc's mmap/trim thresholds so large numpy temporaries reuse
    already-faulted pages instead of round-tripping through mmap/munmap.

    On this workload (repeated ~100 MB im2col buffers) the first-touch
    page faults otherwise dominate wall time. No-op off Linux/glibc.
    """
    global _tuned
    if _tuned or not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass
    _tuned = True
