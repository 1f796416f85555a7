"""Self-contained singular values via one-sided Jacobi rotations.

Used for numerical-rank probes so rank measurements do not depend on any
external LAPACK behavior.  One-sided Jacobi orthogonalizes the columns of
the working matrix; the singular values are the final column norms.  Cost
per sweep is O(rows * cols^2), so callers probing very wide matrices should
pass the transpose (``rank`` does this automatically).
"""

import numpy as np

from ..errors import DimensionError

_EPS = np.finfo(np.float64).eps


def singular_values(a: np.ndarray, max_sweeps: int = 60) -> np.ndarray:
    """Descending singular values of a real matrix.

    Sweeps stop once every column pair is numerically orthogonal
    (|<ci, cj>| <= tol * |ci| |cj|).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"singular_values needs a matrix, got shape {a.shape}")
    if a.shape[0] < a.shape[1]:
        a = a.T
    work = a.copy()
    n = work.shape[1]
    if n == 0:
        return np.zeros(0)
    tol = 10.0 * _EPS
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            cp = work[:, p]
            for q in range(p + 1, n):
                cq = work[:, q]
                gamma = float(cp @ cq)
                alpha = float(cp @ cp)
                beta = float(cq @ cq)
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * cp - s * cq
                new_q = s * cp + c * cq
                work[:, p] = new_p
                work[:, q] = new_q
                cp = work[:, p]
        if not rotated:
            break
    values = np.sqrt((work * work).sum(axis=0))
    values.sort()
    return values[::-1].copy()


def rank(a: np.ndarray, tol: float | None = None) -> int:
    """Numerical rank: singular values above ``tol``.

    Default tolerance is max(shape) * sigma_max * machine epsilon.
    """
    s = singular_values(a)
    if s.size == 0 or s[0] == 0.0:
        return 0
    if tol is None:
        tol = max(a.shape) * s[0] * _EPS
    return int(np.count_nonzero(s > tol))
