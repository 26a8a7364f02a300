"""Pure numpy fit kernel, used when the compiled kernel is unavailable.

Vectorized over pixels; follows the compiled kernel step for step:
coarse grid search on the residual with s0 profiled out, golden-section refinement of
the bracket around the best grid point, one parabolic polish accepted only
if it lowers the objective, then an explicit check of touched bounds.
"""
from __future__ import annotations

import numpy as np

INVPHI = 0.6180339887498949
JOINT, FIXED = 0, 1


def _objective(sig: np.ndarray, te: np.ndarray, t2: np.ndarray, mode: int) -> np.ndarray:
    e = np.exp(-te[None, :] / t2[:, None])
    if mode == JOINT:
        amp = (sig * e).sum(axis=1) / (e * e).sum(axis=1)
    else:
        amp = sig[:, 0]
    r = amp[:, None] * e - sig
    return (r * r).sum(axis=1)


def fit_block(signals: np.ndarray, echoes: np.ndarray, grid: np.ndarray, mode: int,
              lo: float, hi: float, tol: float):
    """Fit every row of ``signals`` (P x C). Returns t2, s0, residual, valid."""
    sig = np.ascontiguousarray(signals, dtype=np.float64)
    te = np.asarray(echoes, dtype=np.float64)
    n_pix = sig.shape[0]
    t2 = np.zeros(n_pix)
    s0 = np.zeros(n_pix)
    res = np.zeros(n_pix)
    valid = np.zeros(n_pix, dtype=np.uint8)

    live = np.flatnonzero(np.isfinite(sig).all(axis=1) & (sig != 0.0).any(axis=1))
    if live.size == 0:
        return t2, s0, res, valid
    s = sig[live]

    gexp = np.exp(-te[None, :] / grid[:, None])  # G x C
    if mode == JOINT:
        amp = (s @ gexp.T) / (gexp * gexp).sum(axis=1)[None, :]
    else:
        amp = np.repeat(s[:, :1], grid.size, axis=1)
    r = amp[:, :, None] * gexp[None, :, :] - s[:, None, :]
    obj = (r * r).sum(axis=2)
    k = obj.argmin(axis=1)
    last = grid.size - 1
    a = grid[np.maximum(k - 1, 0)]
    b = grid[np.minimum(k + 1, last)]
    touch_lo = k == 0
    touch_hi = k == last

    c = b - INVPHI * (b - a)
    d = a + INVPHI * (b - a)
    fc = _objective(s, te, c, mode)
    fd = _objective(s, te, d, mode)
    active = np.flatnonzero((b - a) > tol)
    while active.size:
        left = fc[active] < fd[active]
        il, ir = active[left], active[~left]
        # minimum in [a, d]
        b[il] = d[il]
        d[il] = c[il]
        fd[il] = fc[il]
        c[il] = b[il] - INVPHI * (b[il] - a[il])
        fc[il] = _objective(s[il], te, c[il], mode)
        # minimum in [c, b]
        a[ir] = c[ir]
        c[ir] = d[ir]
        fc[ir] = fd[ir]
        d[ir] = a[ir] + INVPHI * (b[ir] - a[ir])
        fd[ir] = _objective(s[ir], te, d[ir], mode)
        active = active[(b[active] - a[active]) > tol]

    m = 0.5 * (a + b)
    fm = _objective(s, te, m, mode)
    best, fbest = m.copy(), fm.copy()
    for x, fx in ((c, fc), (d, fd)):
        take = fx < fbest
        best[take], fbest[take] = x[take], fx[take]

    # parabola through (c, fc), (m, fm), (d, fd)
    p = (m - c) ** 2 * (fm - fd) - (m - d) ** 2 * (fm - fc)
    q = (m - c) * (fm - fd) - (m - d) * (fm - fc)
    with np.errstate(divide="ignore", invalid="ignore"):
        xp = m - 0.5 * p / q
    ok = np.isfinite(xp) & (q != 0.0) & (xp >= a) & (xp <= b)
    if ok.any():
        idx = np.flatnonzero(ok)
        fx = _objective(s[idx], te, xp[idx], mode)
        better = fx < fbest[idx]
        best[idx[better]], fbest[idx[better]] = xp[idx[better]], fx[better]

    for touch, bound in ((touch_lo, lo), (touch_hi, hi)):
        idx = np.flatnonzero(touch)
        if idx.size:
            fb = _objective(s[idx], te, np.full(idx.size, bound), mode)
            better = fb < fbest[idx]
            best[idx[better]], fbest[idx[better]] = bound, fb[better]

    e = np.exp(-te[None, :] / best[:, None])
    if mode == JOINT:
        amp = (s * e).sum(axis=1) / (e * e).sum(axis=1)
    else:
        amp = s[:, 0].copy()
    r = amp[:, None] * e - s
    t2[live] = best
    s0[live] = amp
    res[live] = (r * r).sum(axis=1)
    valid[live] = ((best > lo) & (best < hi)).astype(np.uint8)
    return t2, s0, res, valid
