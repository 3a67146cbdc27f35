# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the sampling and histogram loops in ``_pykernels``."""
import numpy as np

cimport numpy as cnp
from libc.math cimport floor, fabs

cnp.import_array()


cdef inline double _bilinear(const double[:, ::1] img, Py_ssize_t h, Py_ssize_t w,
                             double x, double y, bint clamp, double pad=0.0) noexcept nogil:
    cdef Py_ssize_t x0, y0, x1, y1
    cdef double fx, fy, top, bot
    if not clamp and not (x >= -pad and x <= w - 1.0 + pad and y >= -pad and y <= h - 1.0 + pad):
        return 0.0
    if x < 0.0:
        x = 0.0
    elif x > w - 1.0:
        x = w - 1.0
    if y < 0.0:
        y = 0.0
    elif y > h - 1.0:
        y = h - 1.0
    x0 = <Py_ssize_t>floor(x)
    y0 = <Py_ssize_t>floor(y)
    if x0 > w - 1:
        x0 = w - 1
    if y0 > h - 1:
        y0 = h - 1
    x1 = x0 + 1 if x0 + 1 < w else w - 1
    y1 = y0 + 1 if y0 + 1 < h else h - 1
    fx = x - x0
    fy = y - y0
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def sample_bilinear(img, xs, ys, clamp=False, double pad=0.0):
    cdef const double[:, ::1] im = np.ascontiguousarray(img, dtype=np.float64)
    xs_a = np.ascontiguousarray(xs, dtype=np.float64)
    ys_a = np.ascontiguousarray(ys, dtype=np.float64)
    if xs_a.shape != ys_a.shape:
        raise ValueError("xs and ys must have the same shape")
    shape = xs_a.shape
    cdef const double[::1] xv = xs_a.ravel()
    cdef const double[::1] yv = ys_a.ravel()
    out = np.empty(xv.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef Py_ssize_t h = im.shape[0], w = im.shape[1]
    cdef bint cl = clamp
    with nogil:
        for i in range(n):
            ov[i] = _bilinear(im, h, w, xv[i], yv[i], cl, pad)
    return out.reshape(shape)


def affine_sample(img, mat, out_shape):
    cdef const double[:, ::1] im = np.ascontiguousarray(img, dtype=np.float64)
    m = np.asarray(mat, dtype=np.float64)
    cdef double a = m[0, 0], b = m[0, 1], c = m[0, 2]
    cdef double d = m[1, 0], e = m[1, 1], f = m[1, 2]
    cdef Py_ssize_t ho = out_shape[0], wo = out_shape[1]
    out = np.empty((ho, wo), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t h = im.shape[0], w = im.shape[1]
    cdef Py_ssize_t r, col
    cdef double x, y
    with nogil:
        for r in range(ho):
            for col in range(wo):
                x = a * col + b * r + c
                y = d * col + e * r + f
                ov[r, col] = _bilinear(im, h, w, x, y, False)
    return out


cdef inline double _bs3(double x) noexcept nogil:
    cdef double a = fabs(x)
    if a < 1.0:
        return 2.0 / 3.0 - a * a + 0.5 * a * a * a
    if a < 2.0:
        return (2.0 - a) * (2.0 - a) * (2.0 - a) / 6.0
    return 0.0


cdef inline double _bs3d(double x) noexcept nogil:
    cdef double a = fabs(x)
    if a < 1.0:
        return -2.0 * x + 1.5 * x * a
    if a < 2.0:
        if x > 0:
            return -(2.0 - a) * (2.0 - a) / 2.0
        return (2.0 - a) * (2.0 - a) / 2.0
    return 0.0


cdef inline Py_ssize_t _fold(Py_ssize_t b, Py_ssize_t nb) noexcept nogil:
    if b < 0:
        return -b - 1
    if b >= nb:
        return 2 * nb - b - 1
    return b


def _mask_view(mask, Py_ssize_t n):
    if mask is None:
        return np.ones(n, dtype=np.uint8)
    return np.ascontiguousarray(mask, dtype=np.uint8).ravel()


def joint_histogram(fbins, mvals, Py_ssize_t nbins, bspline=True, mask=None):
    cdef const cnp.int64_t[::1] fb = np.ascontiguousarray(fbins, dtype=np.int64).ravel()
    cdef const double[::1] mv = np.ascontiguousarray(mvals, dtype=np.float64).ravel()
    cdef const cnp.uint8_t[::1] mk = _mask_view(mask, mv.shape[0])
    hist = np.zeros((nbins, nbins), dtype=np.float64)
    cdef double[:, ::1] hv = hist
    cdef Py_ssize_t i, t, b, first, mb, n = mv.shape[0]
    cdef double m, s
    cdef bint bs = bspline
    with nogil:
        for i in range(n):
            if not mk[i]:
                continue
            m = mv[i]
            if m < 0.0:
                m = 0.0
            elif m > 1.0:
                m = 1.0
            if not bs:
                mb = <Py_ssize_t>(m * nbins)
                if mb > nbins - 1:
                    mb = nbins - 1
                hv[fb[i], mb] += 1.0
                continue
            s = m * nbins - 0.5
            first = <Py_ssize_t>floor(s) - 1
            for t in range(4):
                b = first + t
                hv[fb[i], _fold(b, nbins)] += _bs3(s - b)
    return hist


def mi_gradient(fbins, mvals, Py_ssize_t nbins, table, mask=None):
    cdef const cnp.int64_t[::1] fb = np.ascontiguousarray(fbins, dtype=np.int64).ravel()
    cdef const double[::1] mv = np.ascontiguousarray(mvals, dtype=np.float64).ravel()
    cdef const cnp.uint8_t[::1] mk = _mask_view(mask, mv.shape[0])
    cdef const double[:, ::1] tb = np.ascontiguousarray(table, dtype=np.float64)
    out = np.zeros(mv.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i, t, b, first, n = mv.shape[0]
    cdef double m, s, acc
    with nogil:
        for i in range(n):
            m = mv[i]
            if not mk[i] or m < 0.0 or m > 1.0:
                continue
            s = m * nbins - 0.5
            first = <Py_ssize_t>floor(s) - 1
            acc = 0.0
            for t in range(4):
                b = first + t
                acc = acc + tb[fb[i], _fold(b, nbins)] * _bs3d(s - b)
            ov[i] = acc * nbins
    return out


cdef inline void _field_at(const double[:, :, ::1] u, Py_ssize_t h, Py_ssize_t w,
                           double x, double y, double* ox, double* oy) noexcept nogil:
    cdef Py_ssize_t x0, y0, x1, y1
    cdef double fx, fy
    if x < 0.0:
        x = 0.0
    elif x > w - 1.0:
        x = w - 1.0
    if y < 0.0:
        y = 0.0
    elif y > h - 1.0:
        y = h - 1.0
    x0 = <Py_ssize_t>floor(x)
    y0 = <Py_ssize_t>floor(y)
    if x0 > w - 1:
        x0 = w - 1
    if y0 > h - 1:
        y0 = h - 1
    x1 = x0 + 1 if x0 + 1 < w else w - 1
    y1 = y0 + 1 if y0 + 1 < h else h - 1
    fx = x - x0
    fy = y - y0
    ox[0] = ((u[y0, x0, 0] * (1.0 - fx) + u[y0, x1, 0] * fx) * (1.0 - fy)
             + (u[y1, x0, 0] * (1.0 - fx) + u[y1, x1, 0] * fx) * fy)
    oy[0] = ((u[y0, x0, 1] * (1.0 - fx) + u[y0, x1, 1] * fx) * (1.0 - fy)
             + (u[y1, x0, 1] * (1.0 - fx) + u[y1, x1, 1] * fx) * fy)


def sample_field(u, xs, ys):
    cdef const double[:, :, ::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    xs_a = np.ascontiguousarray(xs, dtype=np.float64)
    ys_a = np.ascontiguousarray(ys, dtype=np.float64)
    if xs_a.shape != ys_a.shape:
        raise ValueError("xs and ys must have the same shape")
    shape = xs_a.shape
    cdef const double[::1] xv = xs_a.ravel()
    cdef const double[::1] yv = ys_a.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    out = np.empty((n, 2), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t h = uv.shape[0], w = uv.shape[1]
    cdef double a, b
    with nogil:
        for i in range(n):
            _field_at(uv, h, w, xv[i], yv[i], &a, &b)
            ov[i, 0] = a
            ov[i, 1] = b
    return out.reshape(shape + (2,))


def square_field(u, Py_ssize_t steps):
    src = np.array(u, dtype=np.float64, order="C")
    dst = np.empty_like(src)
    cdef double[:, :, ::1] sv
    cdef double[:, :, ::1] dv
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1]
    cdef Py_ssize_t r, c, it
    cdef double a, b
    for it in range(steps):
        sv = src
        dv = dst
        with nogil:
            for r in range(h):
                for c in range(w):
                    _field_at(sv, h, w, c + sv[r, c, 0], r + sv[r, c, 1], &a, &b)
                    dv[r, c, 0] = sv[r, c, 0] + a
                    dv[r, c, 1] = sv[r, c, 1] + b
        src, dst = dst, src
    return src


def warp_field_affine(img, u, mat, double pad=0.0):
    cdef const double[:, ::1] im = np.ascontiguousarray(img, dtype=np.float64)
    cdef const double[:, :, ::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    m = np.asarray(mat, dtype=np.float64)
    cdef double a = m[0, 0], b = m[0, 1], c0 = m[0, 2]
    cdef double d = m[1, 0], e = m[1, 1], f = m[1, 2]
    cdef Py_ssize_t h = uv.shape[0], w = uv.shape[1]
    cdef Py_ssize_t hi = im.shape[0], wi = im.shape[1]
    out = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t r, c
    cdef double px, py
    with nogil:
        for r in range(h):
            for c in range(w):
                px = c + uv[r, c, 0]
                py = r + uv[r, c, 1]
                ov[r, c] = _bilinear(im, hi, wi, a * px + b * py + c0, d * px + e * py + f, False, pad)
    return out
