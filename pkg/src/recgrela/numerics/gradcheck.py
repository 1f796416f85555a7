"""Central finite differences: the independent gradient oracle.

Evaluations run with the tape paused so probing a live graph never records
extra nodes.
"""

import numpy as np

from ..errors import ContractError, NumericError
from .tensor import Tensor, tape_paused


def _eval_scalar(f, x: Tensor) -> float:
    out = f(x)
    val = out.item() if isinstance(out, Tensor) else float(out)
    if not np.isfinite(val):
        raise NumericError("finite_diff_grad: function value is not finite")
    return val


def finite_diff_grad(f, x: Tensor, h: float = 1e-5) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h per coordinate of ``x``.

    ``f`` must map a Tensor to a scalar.  ``x.data`` is perturbed in place
    and restored; the returned array has ``x``'s shape.
    """
    if h <= 0:
        raise ContractError(f"finite_diff_grad step must be positive, got {h}")
    grad = np.empty_like(x.data)
    flat_x = x.data.reshape(-1)
    flat_g = grad.reshape(-1)
    with tape_paused():
        for i in range(flat_x.size):
            orig = flat_x[i]
            flat_x[i] = orig + h
            fp = _eval_scalar(f, x)
            flat_x[i] = orig - h
            fm = _eval_scalar(f, x)
            flat_x[i] = orig
            flat_g[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_errors(analytic: np.ndarray, numeric: np.ndarray,
                    skip_below: float = 1e-8) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|), with near-zero coords skipped."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.abs(a), np.abs(n))
    keep = np.abs(a) >= skip_below
    err = np.zeros_like(a)
    err[keep] = np.abs(a[keep] - n[keep]) / denom[keep]
    return err
