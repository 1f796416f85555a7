"""NumPy attention kernels.

Forward passes stream over fixed-size position chunks so the internal
working set stays bounded by the chunk size (state is one d x d accumulator
per head), independent of sequence length.  Backward passes recompute the
forward intermediates in fully vectorized form; they exist only for the
training path, where sequences are short.

One parametrized kernel covers both plain kernelized linear attention and
its rotary-enhanced form:

* ``cos``/``sin`` given      -> queries/keys rotated (full width, before the
                                head split); the normalizer stays unrotated.
* ``scale_len`` given        -> numerator scaled by 1/sqrt(scale_len) and the
                                normalizer uses the (prefix) mean of keys
                                instead of the plain sum.
* ``eps``                    -> added to the normalizer.
* ``mask`` given             -> padding key positions contribute nothing and
                                are excluded from prefix counts.
"""

import numpy as np

from ..errors import DimensionError
from ..numerics import alloc
from ..positional import rotate_pairs

DEN_FLOOR = 1e-30


def phi(x: np.ndarray) -> np.ndarray:
    """ELU(x) + 1: strictly positive feature map."""
    return np.where(x >= 0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def phi_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0)))


def _check_qkv(q, k, v, heads):
    if q.shape != k.shape or q.shape != v.shape or q.ndim != 3:
        raise DimensionError(
            f"q/k/v must share one (B, N, D) shape, got {q.shape}/{k.shape}/{v.shape}")
    if q.shape[2] % heads != 0:
        raise DimensionError(f"width {q.shape[2]} not divisible by {heads} heads")


def _heads(x: np.ndarray, h: int) -> np.ndarray:
    """(B, C, D) -> (B, h, C, d)."""
    b, c, dd = x.shape
    return x.reshape(b, c, h, dd // h).transpose(0, 2, 1, 3)


def _merge(x: np.ndarray) -> np.ndarray:
    """(B, h, C, d) -> (B, C, D)."""
    b, h, c, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, c, h * d)


def kla_forward(q, k, v, *, heads=1, causal=False, eps=0.0, scale_len=None,
                cos=None, sin=None, mask=None, out=None, chunk=256):
    """Kernelized linear attention, streamed over position chunks.

    q, k, v: (B, N, D); cos/sin: (N, D/2) rotation tables or None;
    mask: (B, N) of 0/1 or None.  Writes into ``out`` when given.
    Returns (out, floor_count) where floor_count is the number of real
    positions whose normalizer had to be floored.
    """
    _check_qkv(q, k, v, heads)
    b, n, dd = q.shape
    d = dd // heads
    if out is None:
        out = alloc.new((b, n, dd))
    inv_scale = 1.0 / np.sqrt(scale_len) if scale_len else 1.0
    state_kv = alloc.zeros((b, heads, d, d))
    state_z = alloc.zeros((b, heads, d))
    count_carry = np.zeros((b, 1))
    floor_count = 0

    def chunk_inputs(a, e):
        fq = phi(q[:, a:e])
        fk = phi(k[:, a:e])
        if cos is not None:
            rq = rotate_pairs(fq, cos[a:e], sin[a:e])
            rk = rotate_pairs(fk, cos[a:e], sin[a:e])
        else:
            rq, rk = fq, fk
        if mask is not None:
            mcol = mask[:, a:e, None]
            rk = rk * mcol
            fk = fk * mcol
        return fq, fk, rq, rk

    if not causal:
        # pass 1: totals
        for a in range(0, n, chunk):
            e = min(a + chunk, n)
            _, fk, _, rk = chunk_inputs(a, e)
            rkh = _heads(rk, heads)
            vh = _heads(v[:, a:e], heads)
            state_kv += np.einsum("bhcd,bhce->bhde", rkh, vh)
            state_z += _heads(fk, heads).sum(axis=2)
        if scale_len:
            total = (mask.sum(axis=1, keepdims=True) if mask is not None
                     else np.full((b, 1), float(n)))
            total = np.maximum(total, 1.0)
        # pass 2: outputs
        for a in range(0, n, chunk):
            e = min(a + chunk, n)
            fq, _, rq, _ = chunk_inputs(a, e)
            rqh = _heads(rq, heads)
            fqh = _heads(fq, heads)
            num = np.einsum("bhcd,bhde->bhce", rqh, state_kv) * inv_scale
            den = np.einsum("bhcd,bhd->bhc", fqh, state_z)
            if scale_len:
                den = den / total[:, None, :]
            den = den + eps
            low = den < DEN_FLOOR
            if low.any():
                floor_count += _real_count(low, mask, a, e)
                den = np.maximum(den, DEN_FLOOR)
            out[:, a:e] = _merge(num / den[..., None])
        return out, floor_count

    for a in range(0, n, chunk):
        e = min(a + chunk, n)
        fq, fk, rq, rk = chunk_inputs(a, e)
        rqh, rkh = _heads(rq, heads), _heads(rk, heads)
        fqh, fkh = _heads(fq, heads), _heads(fk, heads)
        vh = _heads(v[:, a:e], heads)
        kv = alloc.register(np.einsum("bhcd,bhce->bhcde", rkh, vh))
        np.cumsum(kv, axis=2, out=kv)
        kv += state_kv[:, :, None]
        num = np.einsum("bhcd,bhcde->bhce", rqh, kv) * inv_scale
        z = np.cumsum(fkh, axis=2) + state_z[:, :, None]
        den = np.einsum("bhcd,bhcd->bhc", fqh, z)
        if scale_len:
            if mask is not None:
                cnt = np.cumsum(mask[:, a:e], axis=1) + count_carry
                count_carry = cnt[:, -1:].copy()
            else:
                cnt = np.arange(a + 1, e + 1, dtype=np.float64)[None, :]
            den = den / np.maximum(cnt, 1.0)[:, None, :]
        den = den + eps
        low = den < DEN_FLOOR
        if low.any():
            floor_count += _real_count(low, mask, a, e)
            den = np.maximum(den, DEN_FLOOR)
        out[:, a:e] = _merge(num / den[..., None])
        state_kv = kv[:, :, -1].copy()
        state_z = z[:, :, -1].copy()
        del kv, z, num, den  # keep one chunk's working set live at a time
    return out, floor_count


def _real_count(low: np.ndarray, mask, a: int, e: int) -> int:
    """Floored positions, ignoring padding rows (their outputs are unused)."""
    if mask is None:
        return int(np.count_nonzero(low))
    return int(np.count_nonzero(low & (mask[:, None, a:e] > 0)))


def kla_backward(g, q, k, v, *, heads=1, causal=False, eps=0.0, scale_len=None,
                 cos=None, sin=None, mask=None):
    """Gradients of kla_forward w.r.t. q, k, v (recomputes intermediates)."""
    _check_qkv(q, k, v, heads)
    b, n, dd = q.shape
    d = dd // heads
    inv_scale = 1.0 / np.sqrt(scale_len) if scale_len else 1.0

    fq, fk = phi(q), phi(k)
    if cos is not None:
        rq = rotate_pairs(fq, cos[:n], sin[:n])
        rk = rotate_pairs(fk, cos[:n], sin[:n])
    else:
        rq, rk = fq, fk
    if mask is not None:
        rk_m = rk * mask[:, :, None]
        fk_m = fk * mask[:, :, None]
    else:
        rk_m, fk_m = rk, fk

    rqh, rkh = _heads(rq, heads), _heads(rk_m, heads)
    fqh, fkh = _heads(fq, heads), _heads(fk_m, heads)
    vh = _heads(v, heads)
    gh = _heads(g, heads)

    kv = np.einsum("bhnd,bhne->bhnde", rkh, vh)
    if causal:
        s = np.cumsum(kv, axis=2)
        z = np.cumsum(fkh, axis=2)
        if mask is not None:
            cnt = np.maximum(np.cumsum(mask, axis=1), 1.0)[:, None, :]
        else:
            cnt = np.arange(1, n + 1, dtype=np.float64)[None, None, :]
    else:
        s = np.broadcast_to(kv.sum(axis=2, keepdims=True), kv.shape)
        z = np.broadcast_to(fkh.sum(axis=2, keepdims=True), fkh.shape)
        if mask is not None:
            cnt = np.maximum(mask.sum(axis=1), 1.0)[:, None, None]
        else:
            cnt = np.full((1, 1, 1), float(n))

    num = np.einsum("bhnd,bhnde->bhne", rqh, s) * inv_scale
    den = np.einsum("bhnd,bhnd->bhn", fqh, z)
    if scale_len:
        den = den / cnt
    den = den + eps
    low = den < DEN_FLOOR
    den = np.maximum(den, DEN_FLOOR)

    dnum = gh / den[..., None]
    dden = -(gh * num).sum(axis=-1) / (den * den)
    dden[low] = 0.0  # clamped normalizers pass no gradient

    dnum_raw = dnum * inv_scale
    drqh = np.einsum("bhne,bhnde->bhnd", dnum_raw, s)
    ds = np.einsum("bhnd,bhne->bhnde", rqh, dnum_raw)
    if causal:
        ds = np.flip(np.cumsum(np.flip(ds, axis=2), axis=2), axis=2)
    else:
        ds = np.broadcast_to(ds.sum(axis=2, keepdims=True), ds.shape)
    drkh = np.einsum("bhnde,bhne->bhnd", ds, vh)
    dvh = np.einsum("bhnde,bhnd->bhne", ds, rkh)

    ddot = dden / cnt if scale_len else dden
    dfqh = ddot[..., None] * z
    dz = ddot[..., None] * fqh
    if causal:
        dfkh = np.flip(np.cumsum(np.flip(dz, axis=2), axis=2), axis=2)
    else:
        dfkh = np.broadcast_to(dz.sum(axis=2, keepdims=True), dz.shape)

    drq = _merge(drqh)
    drk = _merge(drkh)
    dfq_den = _merge(dfqh)
    dfk_den = _merge(dfkh)
    if mask is not None:
        drk = drk * mask[:, :, None]
        dfk_den = dfk_den * mask[:, :, None]
    if cos is not None:
        dfq_num = rotate_pairs(drq, cos[:n], -sin[:n])
        dfk_num = rotate_pairs(drk, cos[:n], -sin[:n])
    else:
        dfq_num, dfk_num = drq, drk

    dq = (dfq_num + dfq_den) * phi_grad(q)
    dk = (dfk_num + dfk_den) * phi_grad(k)
    dv = _merge(dvh)
    return dq, dk, dv


# ---------------------------------------------------------------------------
# softmax dot-product attention
# ---------------------------------------------------------------------------


def _sdp_scores(qh, kh, n, causal, mask):
    d = qh.shape[-1]
    scores = alloc.register(np.einsum("bhmd,bhnd->bhmn", qh, kh) / np.sqrt(d))
    if causal:
        scores = scores + np.triu(np.full((n, n), -np.inf), k=1)
    if mask is not None:
        scores = np.where(mask[:, None, None, :] > 0, scores, -np.inf)
    return scores


def _sdp_weights(scores):
    with np.errstate(invalid="ignore"):
        m = scores.max(axis=-1, keepdims=True)
        shifted = np.where(np.isfinite(m), scores - m, -np.inf)
        e = np.exp(shifted)
        tot = e.sum(axis=-1, keepdims=True)
        w = np.where(tot > 0, e / np.where(tot > 0, tot, 1.0), 0.0)
    return w


def sdp_forward(q, k, v, *, heads=1, causal=False, mask=None, out=None):
    """Softmax dot-product attention (materializes the weight matrix)."""
    _check_qkv(q, k, v, heads)
    b, n, dd = q.shape
    if out is None:
        out = alloc.new((b, n, dd))
    qh, kh, vh = _heads(q, heads), _heads(k, heads), _heads(v, heads)
    w = _sdp_weights(_sdp_scores(qh, kh, n, causal, mask))
    out[:] = _merge(np.einsum("bhmn,bhnd->bhmd", w, vh))
    return out


def sdp_backward(g, q, k, v, *, heads=1, causal=False, mask=None):
    _check_qkv(q, k, v, heads)
    b, n, dd = q.shape
    d = dd // heads
    qh, kh, vh = _heads(q, heads), _heads(k, heads), _heads(v, heads)
    gh = _heads(g, heads)
    w = _sdp_weights(_sdp_scores(qh, kh, n, causal, mask))
    dw = np.einsum("bhmd,bhnd->bhmn", gh, vh)
    dscores = w * (dw - (dw * w).sum(axis=-1, keepdims=True))
    inv = 1.0 / np.sqrt(d)
    dqh = np.einsum("bhmn,bhnd->bhmd", dscores, kh) * inv
    dkh = np.einsum("bhmn,bhmd->bhnd", dscores, qh) * inv
    dvh = np.einsum("bhmn,bhmd->bhnd", w, gh)
    return _merge(dqh), _merge(dkh), _merge(dvh)


# ---------------------------------------------------------------------------
# depthwise causal 1-D convolution over positions
# ---------------------------------------------------------------------------


def causal_conv_forward(x, kern, out=None):
    """out[b, t, c] = sum_j kern[j, c] * x[b, t - (kw-1) + j, c], zero-padded.

    x: (B, N, D); kern: (kw, D).  Tap kw-1 multiplies the current position.
    """
    b, n, dd = x.shape
    kw = kern.shape[0]
    if kern.shape != (kw, dd):
        raise DimensionError(f"conv kernel {kern.shape} incompatible with width {dd}")
    if out is None:
        out = alloc.new((b, n, dd))
    xpad = np.zeros((b, n + kw - 1, dd))
    xpad[:, kw - 1:] = x
    out[:] = 0.0
    for j in range(kw):
        out += kern[j] * xpad[:, j:j + n]
    return out


def causal_conv_backward(g, x, kern):
    b, n, dd = x.shape
    kw = kern.shape[0]
    xpad = np.zeros((b, n + kw - 1, dd))
    xpad[:, kw - 1:] = x
    dkern = np.empty_like(kern)
    dxpad = np.zeros_like(xpad)
    for j in range(kw):
        dkern[j] = (g * xpad[:, j:j + n]).sum(axis=(0, 1))
        dxpad[:, j:j + n] += kern[j] * g
    return dxpad[:, kw - 1:].copy(), dkern
