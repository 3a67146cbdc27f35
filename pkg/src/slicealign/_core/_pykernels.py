"""Pure numpy implementations of the hot loops.

Semantics here are the reference for the compiled module; both must agree to
floating-point round-off.
"""
import numpy as np


def sample_bilinear(img, xs, ys, clamp=False, pad=0.0):
    """Bilinear samples of a 2D array at continuous (x=column, y=row) points.

    With ``clamp`` false, points farther than ``pad`` outside
    ``[0, W-1] x [0, H-1]`` give 0 and points within that band read the
    nearest edge; with ``clamp`` true every coordinate is clamped to the border.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    h, w = img.shape
    if clamp:
        x = np.clip(xs, 0.0, w - 1.0)
        y = np.clip(ys, 0.0, h - 1.0)
        inside = None
    else:
        inside = (xs >= -pad) & (xs <= w - 1.0 + pad) & (ys >= -pad) & (ys <= h - 1.0 + pad)
        x = np.where(inside, np.clip(xs, 0.0, w - 1.0), 0.0)
        y = np.where(inside, np.clip(ys, 0.0, h - 1.0), 0.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x0 = np.minimum(x0, w - 1)
    y0 = np.minimum(y0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    if inside is not None:
        out = np.where(inside, out, 0.0)
    return out


def _bspline3(x):
    a = np.abs(x)
    return np.where(
        a < 1.0,
        2.0 / 3.0 - a * a + 0.5 * a * a * a,
        np.where(a < 2.0, (2.0 - a) ** 3 / 6.0, 0.0),
    )


def _bspline3_deriv(x):
    a = np.abs(x)
    return np.where(
        a < 1.0,
        -2.0 * x + 1.5 * x * a,
        np.where(a < 2.0, -np.sign(x) * (2.0 - a) ** 2 / 2.0, 0.0),
    )


def _fold(b, nbins):
    b = np.where(b < 0, -b - 1, b)
    return np.where(b >= nbins, 2 * nbins - b - 1, b)


def _bspline_taps(mvals, nbins):
    m = np.clip(np.asarray(mvals, dtype=np.float64), 0.0, 1.0)
    s = m * nbins - 0.5
    first = np.floor(s).astype(np.int64) - 1
    return s, first


def joint_histogram(fbins, mvals, nbins, bspline=True, mask=None):
    """Unnormalized joint histogram, rows = fixed bin, columns = moving bin.

    Pixels where ``mask`` is false are skipped.
    """
    fbins = np.asarray(fbins, dtype=np.int64).ravel()
    mvals = np.asarray(mvals, dtype=np.float64).ravel()
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).ravel()
        fbins, mvals = fbins[keep], mvals[keep]
    if not bspline:
        m = np.clip(mvals, 0.0, 1.0)
        mb = np.minimum((m * nbins).astype(np.int64), nbins - 1)
        counts = np.bincount(fbins * nbins + mb, minlength=nbins * nbins)
        return counts.astype(np.float64).reshape(nbins, nbins)
    s, first = _bspline_taps(mvals, nbins)
    hist = np.zeros(nbins * nbins, dtype=np.float64)
    for t in range(4):
        b = first + t
        wgt = _bspline3(s - b)
        hist += np.bincount(fbins * nbins + _fold(b, nbins), weights=wgt, minlength=nbins * nbins)
    return hist.reshape(nbins, nbins)


def mi_gradient(fbins, mvals, nbins, table, mask=None):
    """Per-pixel sum_b table[f, b] * d(window)/d(m), unnormalized.

    ``table`` is usually ``log(p(f, m) / p_m(m))``; the caller divides by the
    pixel count. Pixels where ``mask`` is false get zero.
    """
    fbins = np.asarray(fbins, dtype=np.int64).ravel()
    mvals = np.asarray(mvals, dtype=np.float64).ravel()
    table = np.ascontiguousarray(table, dtype=np.float64)
    s, first = _bspline_taps(mvals, nbins)
    out = np.zeros(mvals.shape, dtype=np.float64)
    for t in range(4):
        b = first + t
        out += table[fbins, _fold(b, nbins)] * _bspline3_deriv(s - b)
    out *= nbins
    inside = (mvals >= 0.0) & (mvals <= 1.0)
    if mask is not None:
        inside &= np.asarray(mask, dtype=bool).ravel()
    return np.where(inside, out, 0.0)


def affine_sample(img, mat, out_shape):
    """Zero-background bilinear resampling of ``img`` on an affine grid.

    Output pixel (x, y) reads ``img`` at ``mat @ (x, y, 1)``; ``mat`` is 2x3.
    """
    mat = np.asarray(mat, dtype=np.float64)
    h, w = out_shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xs = mat[0, 0] * xx + mat[0, 1] * yy + mat[0, 2]
    ys = mat[1, 0] * xx + mat[1, 1] * yy + mat[1, 2]
    return sample_bilinear(img, xs, ys, clamp=False)


def sample_field(u, xs, ys):
    """Border-clamped bilinear samples of an (H, W, 2) field."""
    u = np.asarray(u, dtype=np.float64)
    dx = sample_bilinear(u[..., 0], xs, ys, clamp=True)
    dy = sample_bilinear(u[..., 1], xs, ys, clamp=True)
    return np.stack([dx, dy], axis=-1)


def square_field(u, steps):
    """Apply ``u <- u + u(id + u)`` ``steps`` times (scaling-and-squaring core)."""
    u = np.array(u, dtype=np.float64)
    h, w = u.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(int(steps)):
        u = u + sample_field(u, xx + u[..., 0], yy + u[..., 1])
    return u


def warp_field_affine(img, u, mat, pad=0.0):
    """Zero-background sample of ``img`` at ``mat @ (p + u(p))`` for every grid point p."""
    u = np.asarray(u, dtype=np.float64)
    mat = np.asarray(mat, dtype=np.float64)
    h, w = u.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    px = xx + u[..., 0]
    py = yy + u[..., 1]
    xs = mat[0, 0] * px + mat[0, 1] * py + mat[0, 2]
    ys = mat[1, 0] * px + mat[1, 1] * py + mat[1, 2]
    return sample_bilinear(img, xs, ys, clamp=False, pad=pad)
