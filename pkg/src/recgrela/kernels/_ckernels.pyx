# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled streaming attention kernels (forward only).

Same contracts as the NumPy backend: the linear kernel keeps one d x d
accumulator per head (constant working set), the dot-product kernel uses a
single length-N score buffer per query row.  All scratch buffers are
allocated by the Python wrapper so the engine's allocation tracker sees
them.
"""

from libc.math cimport exp, sqrt

cdef double DEN_FLOOR = 1e-30


cdef inline double _phi(double x) noexcept nogil:
    return x + 1.0 if x >= 0.0 else exp(x)


def kla_forward(const double[:, :, ::1] q,
                const double[:, :, ::1] k,
                const double[:, :, ::1] v,
                int heads, bint causal, double eps, double scale_len,
                const double[:, ::1] cos_t, const double[:, ::1] sin_t,
                bint rotate,
                const double[:, ::1] mask, bint has_mask,
                double[:, :, ::1] out,
                double[:, :, ::1] state_kv, double[:, ::1] state_z,
                double[::1] fq, double[::1] fk,
                double[::1] rq, double[::1] rk):
    cdef Py_ssize_t nbatch = q.shape[0]
    cdef Py_ssize_t nseq = q.shape[1]
    cdef Py_ssize_t width = q.shape[2]
    cdef Py_ssize_t d = width // heads
    cdef Py_ssize_t half = width // 2
    cdef Py_ssize_t b, n, h, i, j, t, base
    cdef double m, cnt, den, acc, c, s, a0, a1, total_cnt
    cdef double inv_scale = 1.0
    cdef bint scaled = scale_len > 0.0
    cdef int floors = 0
    if scaled:
        inv_scale = 1.0 / sqrt(scale_len)

    with nogil:
        for b in range(nbatch):
            for h in range(heads):
                for i in range(d):
                    state_z[h, i] = 0.0
                    for j in range(d):
                        state_kv[h, i, j] = 0.0
            cnt = 0.0

            if not causal:
                # pass 1: totals over the whole sequence
                for n in range(nseq):
                    m = mask[b, n] if has_mask else 1.0
                    cnt += m
                    for i in range(width):
                        fk[i] = _phi(k[b, n, i])
                    if rotate:
                        for t in range(half):
                            c = cos_t[n, t]
                            s = sin_t[n, t]
                            a0 = fk[2 * t]
                            a1 = fk[2 * t + 1]
                            rk[2 * t] = a0 * c - a1 * s
                            rk[2 * t + 1] = a0 * s + a1 * c
                    else:
                        for i in range(width):
                            rk[i] = fk[i]
                    if has_mask:
                        for i in range(width):
                            rk[i] *= m
                            fk[i] *= m
                    for h in range(heads):
                        base = h * d
                        for i in range(d):
                            state_z[h, i] += fk[base + i]
                            for j in range(d):
                                state_kv[h, i, j] += rk[base + i] * v[b, n, base + j]
                total_cnt = cnt if cnt > 1.0 else 1.0

            for n in range(nseq):
                if causal:
                    m = mask[b, n] if has_mask else 1.0
                    cnt += m
                for i in range(width):
                    fq[i] = _phi(q[b, n, i])
                    fk[i] = _phi(k[b, n, i])
                if rotate:
                    for t in range(half):
                        c = cos_t[n, t]
                        s = sin_t[n, t]
                        a0 = fq[2 * t]
                        a1 = fq[2 * t + 1]
                        rq[2 * t] = a0 * c - a1 * s
                        rq[2 * t + 1] = a0 * s + a1 * c
                        a0 = fk[2 * t]
                        a1 = fk[2 * t + 1]
                        rk[2 * t] = a0 * c - a1 * s
                        rk[2 * t + 1] = a0 * s + a1 * c
                else:
                    for i in range(width):
                        rq[i] = fq[i]
                        rk[i] = fk[i]
                if causal:
                    if has_mask:
                        for i in range(width):
                            rk[i] *= m
                            fk[i] *= m
                    for h in range(heads):
                        base = h * d
                        for i in range(d):
                            state_z[h, i] += fk[base + i]
                            for j in range(d):
                                state_kv[h, i, j] += rk[base + i] * v[b, n, base + j]
                    total_cnt = cnt if cnt > 1.0 else 1.0

                for h in range(heads):
                    base = h * d
                    den = 0.0
                    for i in range(d):
                        den += fq[base + i] * state_z[h, i]
                    if scaled:
                        den /= total_cnt
                    den += eps
                    if den < DEN_FLOOR:
                        den = DEN_FLOOR
                        if (not has_mask) or (mask[b, n] > 0.0):
                            floors += 1
                    for j in range(d):
                        acc = 0.0
                        for i in range(d):
                            acc += rq[base + i] * state_kv[h, i, j]
                        out[b, n, base + j] = acc * inv_scale / den
    return floors


def sdp_forward(const double[:, :, ::1] q,
                const double[:, :, ::1] k,
                const double[:, :, ::1] v,
                int heads, bint causal,
                const double[:, ::1] mask, bint has_mask,
                double[:, :, ::1] out,
                double[::1] scores):
    cdef Py_ssize_t nbatch = q.shape[0]
    cdef Py_ssize_t nseq = q.shape[1]
    cdef Py_ssize_t width = q.shape[2]
    cdef Py_ssize_t d = width // heads
    cdef Py_ssize_t b, h, mrow, jc, i, base, lim
    cdef double inv = 1.0 / sqrt(<double> d)
    cdef double val, smax, tot, w
    cdef int valid

    with nogil:
        for b in range(nbatch):
            for h in range(heads):
                base = h * d
                for mrow in range(nseq):
                    lim = mrow + 1 if causal else nseq
                    smax = -1e300
                    valid = 0
                    for jc in range(lim):
                        if has_mask and mask[b, jc] <= 0.0:
                            continue
                        val = 0.0
                        for i in range(d):
                            val += q[b, mrow, base + i] * k[b, jc, base + i]
                        val *= inv
                        scores[jc] = val
                        valid += 1
                        if val > smax:
                            smax = val
                    if valid == 0:
                        for i in range(d):
                            out[b, mrow, base + i] = 0.0
                        continue
                    tot = 0.0
                    for jc in range(lim):
                        if has_mask and mask[b, jc] <= 0.0:
                            continue
                        w = exp(scores[jc] - smax)
                        scores[jc] = w
                        tot += w
                    for i in range(d):
                        out[b, mrow, base + i] = 0.0
                    for jc in range(lim):
                        if has_mask and mask[b, jc] <= 0.0:
                            continue
                        w = scores[jc] / tot
                        for i in range(d):
                            out[b, mrow, base + i] += w * v[b, jc, base + i]
