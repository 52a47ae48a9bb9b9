# Compiled hot kernels: conv2d and fully-connected inner loops.
#
# Must stay bit-identical to the reference kernels in ops.py: same
# (ky, kx, cin) accumulation order, float64 accumulators for float32 data,
# per-contribution saturation for fixed point. Compiled with
# -ffp-contract=off so no FMA contraction changes the float rounding
# sequence.

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d_f32(cnp.float32_t[:, :, ::1] xp,
               cnp.float32_t[:, :, :, ::1] w,
               int ho, int wo, int sh, int sw):
    cdef int kh = w.shape[0], kw = w.shape[1], ci = w.shape[2], co = w.shape[3]
    cdef cnp.ndarray[cnp.float32_t, ndim=3] out = np.empty((ho, wo, co), dtype=np.float32)
    cdef cnp.float32_t[:, :, ::1] ov = out
    cdef int oy, ox, oc, ky, kx, c
    cdef double acc
    for oy in range(ho):
        for ox in range(wo):
            for oc in range(co):
                acc = 0.0
                for ky in range(kh):
                    for kx in range(kw):
                        for c in range(ci):
                            acc = acc + (<double> xp[oy * sh + ky, ox * sw + kx, c]) * (<double> w[ky, kx, c, oc])
                ov[oy, ox, oc] = <cnp.float32_t> acc
    return out


def conv2d_fixed(cnp.int64_t[:, :, ::1] xp,
                 cnp.int64_t[:, :, :, ::1] w,
                 int ho, int wo, int sh, int sw,
                 int frac, long long qmin, long long qmax):
    cdef int kh = w.shape[0], kw = w.shape[1], ci = w.shape[2], co = w.shape[3]
    cdef long long lo2 = qmin << frac, hi2 = qmax << frac
    cdef long long half = (1LL << (frac - 1)) if frac > 0 else 0
    cdef cnp.ndarray[cnp.int64_t, ndim=3] out = np.empty((ho, wo, co), dtype=np.int64)
    cdef cnp.int64_t[:, :, ::1] ov = out
    cdef int oy, ox, oc, ky, kx, c
    cdef long long acc, r
    for oy in range(ho):
        for ox in range(wo):
            for oc in range(co):
                acc = 0
                for ky in range(kh):
                    for kx in range(kw):
                        for c in range(ci):
                            acc = acc + xp[oy * sh + ky, ox * sw + kx, c] * w[ky, kx, c, oc]
                            if acc > hi2:
                                acc = hi2
                            elif acc < lo2:
                                acc = lo2
                if frac > 0:
                    if acc >= 0:
                        r = (acc + half) >> frac
                    else:
                        r = -(((-acc) + half) >> frac)
                else:
                    r = acc
                if r > qmax:
                    r = qmax
                elif r < qmin:
                    r = qmin
                ov[oy, ox, oc] = r
    return out


def fc_f32(cnp.float32_t[::1] x, cnp.float32_t[:, ::1] w):
    cdef int n = w.shape[0], m = w.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=1] out = np.empty(m, dtype=np.float32)
    cdef cnp.float32_t[::1] ov = out
    cdef int i, j
    cdef double acc
    for j in range(m):
        acc = 0.0
        for i in range(n):
            acc = acc + (<double> x[i]) * (<double> w[i, j])
        ov[j] = <cnp.float32_t> acc
    return out


def fc_fixed(cnp.int64_t[::1] x, cnp.int64_t[:, ::1] w,
             int frac, long long qmin, long long qmax):
    cdef int n = w.shape[0], m = w.shape[1]
    cdef long long lo2 = qmin << frac, hi2 = qmax << frac
    cdef long long half = (1LL << (frac - 1)) if frac > 0 else 0
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[::1] ov = out
    cdef int i, j
    cdef long long acc, r
    for j in range(m):
        acc = 0
        for i in range(n):
            acc = acc + x[i] * w[i, j]
            if acc > hi2:
                acc = hi2
            elif acc < lo2:
                acc = lo2
        if frac > 0:
            if acc >= 0:
                r = (acc + half) >> frac
            else:
                r = -(((-acc) + half) >> frac)
        else:
            r = acc
        if r > qmax:
            r = qmax
        elif r < qmin:
            r = qmin
        ov[j] = r
    return out
