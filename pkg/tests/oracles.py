"""Independent brute-force oracles used across the test suite.

Everything here is written as plain per-position loops over the defining
sums, deliberately ignoring the streaming/prefix reorderings used by the
implementation under test.
"""

import math

import numpy as np


def phi_scalar(x: float) -> float:
    return x + 1.0 if x >= 0 else math.exp(x)


def phi_vec(x: np.ndarray) -> np.ndarray:
    return np.array([phi_scalar(float(t)) for t in x.reshape(-1)]).reshape(x.shape)


def rotate_vec(x: np.ndarray, angle_row: np.ndarray) -> np.ndarray:
    """Rotate adjacent pairs of one feature vector by the given angles."""
    out = np.empty_like(x)
    for t in range(x.size // 2):
        c, s = math.cos(angle_row[t]), math.sin(angle_row[t])
        a, b = x[2 * t], x[2 * t + 1]
        out[2 * t] = a * c - b * s
        out[2 * t + 1] = a * s + b * c
    return out


def linear_attention_quadratic(q, k, v, causal):
    """O(N^2) two-pass definition of kernelized linear attention (one head)."""
    n = q.shape[0]
    out = np.zeros_like(v)
    for m in range(n):
        lim = m + 1 if causal else n
        acc = np.zeros(v.shape[1])
        wsum = 0.0
        fqm = phi_vec(q[m])
        for j in range(lim):
            w = float(fqm @ phi_vec(k[j]))
            acc += w * v[j]
            wsum += w
        out[m] = acc / wsum
    return out


def dot_product_rowwise(q, k, v, causal):
    """Per-row explicit softmax attention (one head)."""
    n, d = q.shape
    out = np.zeros_like(v)
    for m in range(n):
        lim = m + 1 if causal else n
        scores = np.array([float(q[m] @ k[j]) / math.sqrt(d) for j in range(lim)])
        scores -= scores.max()
        w = np.exp(scores)
        w /= w.sum()
        out[m] = sum(w[j] * v[j] for j in range(lim))
    return out


def rela_naive(q, k, v, angles, causal, eps, scale_len, heads=1):
    """Direct per-position summation of the rotary-enhanced linear form.

    Rotation is applied per position over the full width before the head
    split; the normalizer uses unrotated features and the (prefix) mean of
    keys when scale_len is set, plain sums otherwise.
    """
    n, dd = q.shape
    d = dd // heads
    fq = np.stack([phi_vec(q[m]) for m in range(n)])
    fk = np.stack([phi_vec(k[m]) for m in range(n)])
    if angles is not None:
        rq = np.stack([rotate_vec(fq[m], angles[m]) for m in range(n)])
        rk = np.stack([rotate_vec(fk[m], angles[m]) for m in range(n)])
    else:
        rq, rk = fq, fk
    out = np.zeros_like(v)
    inv_scale = 1.0 / math.sqrt(scale_len) if scale_len else 1.0
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for m in range(n):
            lim = m + 1 if causal else n
            num = np.zeros(d)
            zsum = np.zeros(d)
            for j in range(lim):
                num += float(rq[m, sl] @ rk[j, sl]) * v[j, sl]
                zsum += fk[j, sl]
            num *= inv_scale
            den = float(fq[m, sl] @ zsum)
            if scale_len:
                den /= lim
            out[m, sl] = num / (den + eps)
    return out


def causal_conv_sliding(x, kern):
    """Explicit convolution-sum oracle for the depthwise causal conv."""
    b, n, dd = x.shape
    kw = kern.shape[0]
    out = np.zeros_like(x)
    for bi in range(b):
        for t in range(n):
            for c in range(dd):
                acc = 0.0
                for j in range(kw):
                    src = t - (kw - 1) + j
                    if src >= 0:
                        acc += kern[j, c] * x[bi, src, c]
                out[bi, t, c] = acc
    return out
