"""Attention kernel backends.

Two interchangeable forward implementations exist for the streaming kernels:
the NumPy one (always available) and a compiled Cython extension built at
install time.  The compiled backend is selected at import when present;
``RECGRELA_KERNELS=numpy|cython`` overrides, and ``set_backend`` switches at
runtime.  Backward passes always run through NumPy (training sequences are
short; benchmarks are forward-only).
"""

import os

from ..errors import ContractError
from . import _numpy
from ._numpy import (
    DEN_FLOOR,
    causal_conv_backward,
    causal_conv_forward,
    kla_backward,
    phi,
    phi_grad,
    sdp_backward,
)

try:
    from . import _cywrap

    HAVE_COMPILED = True
except ImportError:
    _cywrap = None
    HAVE_COMPILED = False

_FORWARDS = {"numpy": (_numpy.kla_forward, _numpy.sdp_forward)}
if HAVE_COMPILED:
    _FORWARDS["cython"] = (_cywrap.kla_forward, _cywrap.sdp_forward)

_env = os.environ.get("RECGRELA_KERNELS", "").strip().lower()
if _env and _env not in _FORWARDS:
    raise ContractError(
        f"RECGRELA_KERNELS={_env!r} unavailable; have {sorted(_FORWARDS)}")
_active = _env or ("cython" if HAVE_COMPILED else "numpy")


def available_backends() -> tuple:
    return tuple(sorted(_FORWARDS))


def active_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in _FORWARDS:
        raise ContractError(f"backend {name!r} unavailable; have {sorted(_FORWARDS)}")
    _active = name


def kla_forward(q, k, v, *, backend=None, **kw):
    """Streaming kernelized linear attention; see ``_numpy.kla_forward``."""
    return _FORWARDS[backend or _active][0](q, k, v, **kw)


def sdp_forward(q, k, v, *, backend=None, **kw):
    """Softmax dot-product attention; see ``_numpy.sdp_forward``."""
    return _FORWARDS[backend or _active][1](q, k, v, **kw)
