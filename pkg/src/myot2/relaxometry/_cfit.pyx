# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-pixel fit kernel; releases the GIL for the whole block.

Same algorithm as ``_pyfit.fit_block``, one pixel at a time.
"""
from libc.math cimport exp, isfinite

cdef double INVPHI = 0.6180339887498949
cdef int JOINT = 0
cdef int MAXC = 64


cdef inline double _objective(const double* s, const double* te, int nc,
                              double t2, int mode) noexcept nogil:
    cdef double e, see = 0.0, ee = 0.0, r, acc = 0.0
    cdef int c
    if mode == JOINT:
        for c in range(nc):
            e = exp(-te[c] / t2)
            see += s[c] * e
            ee += e * e
        see /= ee
        for c in range(nc):
            r = see * exp(-te[c] / t2) - s[c]
            acc += r * r
        return acc
    for c in range(nc):
        r = s[0] * exp(-te[c] / t2) - s[c]
        acc += r * r
    return acc


cdef void _fit_one(const double* s, const double* te, int nc,
                   const double* grid, const double* gexp, const double* gee, int ng,
                   int mode, double lo, double hi, double tol,
                   double* t2_out, double* s0_out, double* res_out,
                   unsigned char* valid_out) noexcept nogil:
    cdef int c, k, kbest = 0
    cdef bint nonzero = 0
    cdef double acc, val, e, fbest_grid = 0.0
    cdef double a, b, cc, d, fc, fd, m, fm, best, fbest, p, q, xp, fx, fb
    cdef double see, ee, amp, r

    t2_out[0] = 0.0
    s0_out[0] = 0.0
    res_out[0] = 0.0
    valid_out[0] = 0
    for c in range(nc):
        if not isfinite(s[c]):
            return
        if s[c] != 0.0:
            nonzero = 1
    if not nonzero:
        return

    for k in range(ng):
        if mode == JOINT:
            acc = 0.0
            for c in range(nc):
                acc += s[c] * gexp[k * nc + c]
            amp = acc / gee[k]
            val = 0.0
            for c in range(nc):
                e = amp * gexp[k * nc + c] - s[c]
                val += e * e
        else:
            acc = 0.0
            for c in range(nc):
                e = s[0] * gexp[k * nc + c] - s[c]
                acc += e * e
            val = acc
        if k == 0 or val < fbest_grid:
            fbest_grid = val
            kbest = k

    a = grid[kbest - 1] if kbest > 0 else grid[0]
    b = grid[kbest + 1] if kbest < ng - 1 else grid[ng - 1]
    cc = b - INVPHI * (b - a)
    d = a + INVPHI * (b - a)
    fc = _objective(s, te, nc, cc, mode)
    fd = _objective(s, te, nc, d, mode)
    while (b - a) > tol:
        if fc < fd:
            b = d
            d = cc
            fd = fc
            cc = b - INVPHI * (b - a)
            fc = _objective(s, te, nc, cc, mode)
        else:
            a = cc
            cc = d
            fc = fd
            d = a + INVPHI * (b - a)
            fd = _objective(s, te, nc, d, mode)

    m = 0.5 * (a + b)
    fm = _objective(s, te, nc, m, mode)
    best = m
    fbest = fm
    if fc < fbest:
        best = cc
        fbest = fc
    if fd < fbest:
        best = d
        fbest = fd

    p = (m - cc) * (m - cc) * (fm - fd) - (m - d) * (m - d) * (fm - fc)
    q = (m - cc) * (fm - fd) - (m - d) * (fm - fc)
    if q != 0.0:
        xp = m - 0.5 * p / q
        if isfinite(xp) and xp >= a and xp <= b:
            fx = _objective(s, te, nc, xp, mode)
            if fx < fbest:
                best = xp
                fbest = fx

    if kbest == 0:
        fb = _objective(s, te, nc, lo, mode)
        if fb < fbest:
            best = lo
            fbest = fb
    if kbest == ng - 1:
        fb = _objective(s, te, nc, hi, mode)
        if fb < fbest:
            best = hi
            fbest = fb

    if mode == JOINT:
        see = 0.0
        ee = 0.0
        for c in range(nc):
            e = exp(-te[c] / best)
            see += s[c] * e
            ee += e * e
        amp = see / ee
    else:
        amp = s[0]
    acc = 0.0
    for c in range(nc):
        r = amp * exp(-te[c] / best) - s[c]
        acc += r * r
    t2_out[0] = best
    s0_out[0] = amp
    res_out[0] = acc
    valid_out[0] = 1 if (best > lo and best < hi) else 0


def fit_block(const double[:, ::1] signals, const double[::1] echoes,
              const double[::1] grid, int mode, double lo, double hi, double tol,
              double[::1] t2_out, double[::1] s0_out, double[::1] res_out,
              unsigned char[::1] valid_out, Py_ssize_t start, Py_ssize_t stop):
    """Fit rows ``start:stop`` of ``signals`` into the output buffers."""
    cdef int nc = signals.shape[1]
    cdef int ng = grid.shape[0]
    cdef Py_ssize_t i
    cdef int k, c
    if nc > MAXC:
        raise ValueError(f"at most {MAXC} echoes supported")
    import numpy as np
    gexp_arr = np.empty((ng, nc))
    gee_arr = np.empty(ng)
    cdef double[:, ::1] gexp = gexp_arr
    cdef double[::1] gee = gee_arr
    for k in range(ng):
        gee[k] = 0.0
        for c in range(nc):
            gexp[k, c] = exp(-echoes[c] / grid[k])
            gee[k] += gexp[k, c] * gexp[k, c]
    if stop <= start:
        return
    with nogil:
        for i in range(start, stop):
            _fit_one(&signals[i, 0], &echoes[0], nc, &grid[0], &gexp[0, 0], &gee[0], ng,
                     mode, lo, hi, tol, &t2_out[i], &s0_out[i], &res_out[i], &valid_out[i])
