"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``CLAPS_NUMBA=0`` in the environment to force the numpy path. Both paths
are kept importable (``numba_impl`` / ``numpy_impl``) so tests and the
benchmark script can compare them directly.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("CLAPS_NUMBA", "1") != "0"

_EPS = np.finfo(np.float64).eps


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _np_points_in_boxes(points, lo, hi):
    if lo.shape[0] == 0:
        return np.zeros(points.shape[0], dtype=bool)
    out = np.zeros(points.shape[0], dtype=bool)
    # chunk over points so the (N, B, d) temporary stays small
    step = max(1, 2_000_000 // max(1, lo.shape[0] * lo.shape[1]))
    for s in range(0, points.shape[0], step):
        p = points[s:s + step, None, :]
        inside = np.all((p >= lo[None]) & (p <= hi[None]), axis=2)
        out[s:s + step] = inside.any(axis=1)
    return out


def _np_boxes_overlap(alo, ahi, blo, bhi, strict):
    if blo.shape[0] == 0:
        return np.zeros(alo.shape[0], dtype=bool)
    out = np.zeros(alo.shape[0], dtype=bool)
    step = max(1, 2_000_000 // max(1, blo.shape[0] * blo.shape[1]))
    for s in range(0, alo.shape[0], step):
        a0 = alo[s:s + step, None, :]
        a1 = ahi[s:s + step, None, :]
        if strict:
            ok = (a0 < bhi[None]) & (blo[None] < a1)
        else:
            ok = (a0 <= bhi[None]) & (blo[None] <= a1)
        out[s:s + step] = np.all(ok, axis=2).any(axis=1)
    return out


def _np_interval_affine(lo, hi, W, b):
    c = 0.5 * (lo + hi)
    r = 0.5 * (hi - lo)
    aW = np.abs(W)
    cy = c @ W.T + b
    ry = r @ aW.T
    # outward rounding: bound the float error of both products
    pad = (W.shape[1] + 2) * _EPS * (np.abs(c) @ aW.T + np.abs(b) + ry)
    return cy - ry - pad, cy + ry + pad


def _np_reach_avoid_outcome(in_target, in_unsafe):
    # rows are time steps, columns episodes; unsafe at the hit step is a failure
    T = in_target.shape[0]
    big = T + 1
    t_hit = np.where(in_target.any(axis=0), in_target.argmax(axis=0), big)
    t_bad = np.where(in_unsafe.any(axis=0), in_unsafe.argmax(axis=0), big)
    return (t_hit < big) & (t_hit < t_bad)


def _np_triangular_cdf(x, c):
    x = np.asarray(x, dtype=np.float64)
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), x.shape)
    out = np.where(x >= 0.0, 1.0, 0.0)
    pos = c > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        cs = np.where(pos, c, 1.0)
        xc = np.clip(x, -cs, cs)
        left = (xc + cs) ** 2 / (2 * cs * cs)
        right = 1.0 - (cs - xc) ** 2 / (2 * cs * cs)
        smooth = np.where(xc <= 0, left, right)
    return np.where(pos, smooth, out)


numpy_impl = SimpleNamespace(
    points_in_boxes=_np_points_in_boxes,
    boxes_overlap=_np_boxes_overlap,
    interval_affine=_np_interval_affine,
    reach_avoid_outcome=_np_reach_avoid_outcome,
    triangular_cdf=_np_triangular_cdf,
)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    njit = numba.njit(cache=True, nogil=True)

    @njit
    def _nb_points_in_boxes(points, lo, hi):
        n, d = points.shape
        nb = lo.shape[0]
        out = np.zeros(n, dtype=np.bool_)
        for i in range(n):
            for k in range(nb):
                inside = True
                for j in range(d):
                    v = points[i, j]
                    if v < lo[k, j] or v > hi[k, j]:
                        inside = False
                        break
                if inside:
                    out[i] = True
                    break
        return out

    @njit
    def _nb_boxes_overlap(alo, ahi, blo, bhi, strict):
        n, d = alo.shape
        nb = blo.shape[0]
        out = np.zeros(n, dtype=np.bool_)
        for i in range(n):
            for k in range(nb):
                ok = True
                for j in range(d):
                    if strict:
                        if not (alo[i, j] < bhi[k, j] and blo[k, j] < ahi[i, j]):
                            ok = False
                            break
                    else:
                        if not (alo[i, j] <= bhi[k, j] and blo[k, j] <= ahi[i, j]):
                            ok = False
                            break
                if ok:
                    out[i] = True
                    break
        return out

    @njit
    def _nb_interval_affine(lo, hi, W, b):
        n = lo.shape[0]
        m, k = W.shape
        olo = np.empty((n, m))
        ohi = np.empty((n, m))
        eps = 2.220446049250313e-16
        for i in range(n):
            for r in range(m):
                cy = b[r]
                ry = 0.0
                mag = abs(b[r])
                for j in range(k):
                    c = 0.5 * (lo[i, j] + hi[i, j])
                    h = 0.5 * (hi[i, j] - lo[i, j])
                    w = W[r, j]
                    aw = abs(w)
                    cy += c * w
                    ry += h * aw
                    mag += abs(c) * aw
                pad = (k + 2) * eps * (mag + ry)
                olo[i, r] = cy - ry - pad
                ohi[i, r] = cy + ry + pad
        return olo, ohi

    @njit
    def _nb_reach_avoid_outcome(in_target, in_unsafe):
        T, E = in_target.shape
        out = np.zeros(E, dtype=np.bool_)
        for e in range(E):
            for t in range(T):
                if in_unsafe[t, e]:
                    break
                if in_target[t, e]:
                    out[e] = True
                    break
        return out

    @njit
    def _nb_triangular_cdf_flat(x, c):
        out = np.empty(x.shape[0])
        for i in range(x.shape[0]):
            ci = c[i]
            xi = x[i]
            if ci <= 0.0:
                out[i] = 1.0 if xi >= 0.0 else 0.0
            elif xi <= -ci:
                out[i] = 0.0
            elif xi >= ci:
                out[i] = 1.0
            elif xi <= 0.0:
                out[i] = (xi + ci) ** 2 / (2 * ci * ci)
            else:
                out[i] = 1.0 - (ci - xi) ** 2 / (2 * ci * ci)
        return out

    def _nb_triangular_cdf(x, c):
        x = np.asarray(x, dtype=np.float64)
        cb = np.ascontiguousarray(np.broadcast_to(np.asarray(c, dtype=np.float64), x.shape))
        flat = _nb_triangular_cdf_flat(np.ascontiguousarray(x).reshape(-1), cb.reshape(-1))
        return flat.reshape(x.shape)

    numba_impl = SimpleNamespace(
        points_in_boxes=_nb_points_in_boxes,
        boxes_overlap=_nb_boxes_overlap,
        interval_affine=_nb_interval_affine,
        reach_avoid_outcome=_nb_reach_avoid_outcome,
        triangular_cdf=_nb_triangular_cdf,
    )
else:  # pragma: no cover
    numba_impl = None


def _active():
    return numba_impl if USE_NUMBA else numpy_impl


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def points_in_boxes(points, lo, hi):
    """Mask of points lying in at least one closed box ``[lo_k, hi_k]``."""
    points = _f64(np.atleast_2d(points))
    return _active().points_in_boxes(points, _f64(lo), _f64(hi))


def boxes_overlap(alo, ahi, blo, bhi, strict=False):
    """For each box A_i, whether it meets any box B_k.

    ``strict=True`` requires an overlap of positive volume.
    """
    return _active().boxes_overlap(_f64(alo), _f64(ahi), _f64(blo), _f64(bhi), bool(strict))


# above this input width the BLAS products of the numpy path beat the loop kernel
AFFINE_LOOP_MAX_WIDTH = 8


def interval_affine(lo, hi, W, b):
    """Sound enclosure of ``x @ W.T + b`` for ``x`` in the box ``[lo, hi]``."""
    impl = _active()
    if impl is numba_impl and np.shape(W)[1] > AFFINE_LOOP_MAX_WIDTH:
        impl = numpy_impl
    return impl.interval_affine(_f64(lo), _f64(hi), _f64(W), _f64(b))


def reach_avoid_outcome(in_target, in_unsafe):
    """Per-episode success: target hit strictly before any unsafe visit."""
    it = np.ascontiguousarray(in_target, dtype=np.bool_)
    iu = np.ascontiguousarray(in_unsafe, dtype=np.bool_)
    return _active().reach_avoid_outcome(it, iu)


def triangular_cdf(x, c):
    """CDF of the symmetric triangular law on ``[-c, c]`` with mode 0."""
    return _active().triangular_cdf(x, c)
