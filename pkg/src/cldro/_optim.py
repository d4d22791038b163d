"""Small 1-D search routines shared by the dual solvers.

scipy's golden-section method does not keep evaluations inside a fixed
interval, and the solvers here need exactly that: a closed bracket and a
relative (or absolute) width stopping rule.
"""

import math

import numpy as np

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section(fn, lo, hi, xtol=1e-10, rtol=0.0, maxiter=500):
    """Minimize a unimodal scalar function on ``[lo, hi]``.

    Stops once the bracket width is below ``xtol + rtol * |x|``.
    Returns ``(x, fn(x))`` where ``x`` is the best point evaluated.
    Infinite function values are allowed (treated as very large).
    """
    a, b = float(lo), float(hi)
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(maxiter):
        if abs(b - a) <= xtol + rtol * max(abs(c), abs(d)):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = fn(d)
    # endpoints can win when the minimum sits on the bracket boundary
    candidates = [(fc, c), (fd, d), (fn(a), a), (fn(b), b)]
    fbest, xbest = min(candidates, key=lambda t: t[0])
    return xbest, fbest


def golden_section_vec(fn, lo, hi, xtol=1e-10, maxiter=500):
    """Elementwise golden-section minimization on arrays of brackets.

    ``fn`` maps an array of abscissae (same shape as ``lo``) to an array of
    values; each entry is an independent unimodal problem.
    """
    a = np.array(lo, dtype=np.float64, copy=True)
    b = np.broadcast_to(np.asarray(hi, dtype=np.float64), a.shape).copy()
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(maxiter):
        if np.all(np.abs(b - a) <= xtol):
            break
        left = fc <= fd
        # left: keep [a, d]; right: keep [c, b]
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = np.where(left, b - INV_PHI * (b - a), d)
        new_d = np.where(left, c, a + INV_PHI * (b - a))
        f_old_c, f_old_d = fc, fd
        c, d = new_c, new_d
        # one of the two interior points is reused, the other re-evaluated
        fresh = fn(np.where(left, c, d))
        fc = np.where(left, fresh, f_old_d)
        fd = np.where(left, f_old_c, fresh)
    xs = np.stack([c, d, a, b])
    fs = np.stack([fc, fd, fn(a), fn(b)])
    idx = np.argmin(fs, axis=0)
    take = np.take_along_axis
    return take(xs, idx[None], 0)[0], take(fs, idx[None], 0)[0]
