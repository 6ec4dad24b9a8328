"""Triplane neural fields with orthogonal cross-plane attention, differentiable
volume rendering, and a toy triplane diffusion model, verified against
analytic oracles."""

import ctypes
import os

__version__ = "0.1.0"


def _tune_allocator():
    """Keep large blocks on the glibc heap instead of per-allocation mmap.

    The gradient tape holds many short-lived multi-MB arrays; without this,
    every training step pays mmap plus kernel page-zeroing costs. Best-effort:
    silently a no-op off glibc. Set TRIFIELD_NO_MALLOC_TUNE=1 to disable.
    """
    if os.environ.get("TRIFIELD_NO_MALLOC_TUNE"):
        return
    try:
        libc = ctypes.CDLL(None)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
    except (OSError, AttributeError, TypeError):
        pass


_tune_allocator()
