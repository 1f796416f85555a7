"""Python-side harness for the compiled kernels.

Allocates the scratch buffers through the tracked allocator (so memory
probes see the compiled kernels' working set) and normalizes optional
arguments into the flag/dummy form the extension expects.
"""

import numpy as np

from ..errors import DimensionError
from ..numerics import alloc
from . import _ckernels

_DUMMY2D = np.zeros((1, 1))


def _contig(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def kla_forward(q, k, v, *, heads=1, causal=False, eps=0.0, scale_len=None,
                cos=None, sin=None, mask=None, out=None, chunk=None):
    """Compiled streaming kernelized linear attention.

    Same contract as the NumPy backend; ``chunk`` is accepted for signature
    compatibility (the compiled kernel always streams position by position).
    """
    q, k, v = _contig(q), _contig(k), _contig(v)
    if q.shape != k.shape or q.shape != v.shape or q.ndim != 3:
        raise DimensionError(
            f"q/k/v must share one (B, N, D) shape, got {q.shape}/{k.shape}/{v.shape}")
    b, n, dd = q.shape
    if dd % heads != 0:
        raise DimensionError(f"width {dd} not divisible by {heads} heads")
    if out is None:
        out = alloc.new((b, n, dd))
    d = dd // heads
    state_kv = alloc.zeros((heads, d, d))
    state_z = alloc.zeros((heads, d))
    rows = alloc.new((4, dd))
    rotate = cos is not None
    floors = _ckernels.kla_forward(
        q, k, v, heads, causal, float(eps),
        float(scale_len) if scale_len else 0.0,
        _contig(cos) if rotate else _DUMMY2D,
        _contig(sin) if rotate else _DUMMY2D,
        rotate,
        _contig(mask) if mask is not None else _DUMMY2D,
        mask is not None,
        out, state_kv, state_z, rows[0], rows[1], rows[2], rows[3])
    return out, int(floors)


def sdp_forward(q, k, v, *, heads=1, causal=False, mask=None, out=None):
    """Compiled softmax dot-product attention (O(N) score buffer)."""
    q, k, v = _contig(q), _contig(k), _contig(v)
    if q.shape != k.shape or q.shape != v.shape or q.ndim != 3:
        raise DimensionError(
            f"q/k/v must share one (B, N, D) shape, got {q.shape}/{k.shape}/{v.shape}")
    b, n, dd = q.shape
    if dd % heads != 0:
        raise DimensionError(f"width {dd} not divisible by {heads} heads")
    if out is None:
        out = alloc.new((b, n, dd))
    scores = alloc.new(n)
    _ckernels.sdp_forward(
        q, k, v, heads, causal,
        _contig(mask) if mask is not None else _DUMMY2D,
        mask is not None, out, scores)
    return out
