"""2D rigid, affine and stationary-velocity transforms.

All maps are pull-backs in pixel coordinates: a transform sends a point of the
fixed grid to the point of the moving image that is sampled there, and
``warp(img, u)(p) = img(p + u(p))``. Vectors are stored as (dx, dy) with x the
column axis.

A chain is composed literally as ``rigid o affine o diff``: the velocity
displacement acts on the grid point first, then the affine map, then the rigid
map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.signal import fftconvolve

from . import _core
from .image import Slice2D, read_raw, write_raw

MIN_AFFINE_DET = 0.05
VELOCITY_BOUND_FRACTION = 0.4
# Band (px) past the grid edge that similarity measures read as the edge value.
# Zero: out-of-grid samples are background. A nonzero band was tried and made
# registration of pure noise gain spurious MI along the border.
FOOTPRINT = 0.0


def image_center(h: int, w: int) -> tuple[float, float]:
    return ((w - 1) / 2.0, (h - 1) / 2.0)


@dataclass(frozen=True)
class RigidParams:
    """Rotation (radians) about ``center`` followed by a translation (pixels).

    ``center=None`` means the image center of whatever grid the transform is
    evaluated on.
    """

    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    center: tuple[float, float] | None = None

    def __post_init__(self):
        vals = [self.rotation, *self.translation] + (list(self.center) if self.center else [])
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("rigid parameters must be finite")
        if abs(self.rotation) > math.pi:
            raise ValueError(f"|rotation| must be <= pi, got {self.rotation}")
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))

    def matrix(self, h: int, w: int) -> np.ndarray:
        """3x3 homogeneous matrix of the point map on an h x w grid."""
        cx, cy = self.center if self.center is not None else image_center(h, w)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        tx, ty = self.translation
        return np.array([
            [c, -s, cx - c * cx + s * cy + tx],
            [s, c, cy - s * cx - c * cy + ty],
            [0.0, 0.0, 1.0],
        ])


@dataclass(frozen=True)
class AffineParams:
    """``q = linear @ (p - c) + c + translation`` with ``c`` the image center."""

    linear: tuple = ((1.0, 0.0), (0.0, 1.0))
    translation: tuple[float, float] = (0.0, 0.0)
    center: tuple[float, float] | None = None

    def __post_init__(self):
        lin = np.asarray(self.linear, dtype=np.float64)
        if lin.shape != (2, 2) or not np.all(np.isfinite(lin)):
            raise ValueError("linear part must be a finite 2x2 matrix")
        if np.linalg.det(lin) <= MIN_AFFINE_DET:
            raise ValueError(f"affine determinant must exceed {MIN_AFFINE_DET}")
        object.__setattr__(self, "linear", tuple(tuple(float(v) for v in row) for row in lin))
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))

    def matrix(self, h: int, w: int) -> np.ndarray:
        cx, cy = self.center if self.center is not None else image_center(h, w)
        lin = np.asarray(self.linear)
        c = np.array([cx, cy])
        off = c - lin @ c + np.asarray(self.translation)
        out = np.eye(3)
        out[:2, :2] = lin
        out[:2, 2] = off
        return out


def velocity_bound(h: int, w: int) -> float:
    return VELOCITY_BOUND_FRACTION * min(h, w)


@dataclass(frozen=True)
class DisplacementField:
    grid: np.ndarray  # (H, W, 2) as (dx, dy)

    def __post_init__(self):
        g = np.array(self.grid, dtype=np.float64)
        if g.ndim != 3 or g.shape[2] != 2:
            raise ValueError(f"displacement grid must be HxWx2, got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("displacement must be finite")
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape[:2]

    @classmethod
    def zeros(cls, h, w) -> "DisplacementField":
        return cls(np.zeros((h, w, 2)))


@dataclass(frozen=True)
class VelocityField:
    grid: np.ndarray  # (H, W, 2)
    smoothing_sigma: float = 2.0

    def __post_init__(self):
        g = np.array(self.grid, dtype=np.float64)
        if g.ndim != 3 or g.shape[2] != 2:
            raise ValueError(f"velocity grid must be HxWx2, got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("velocity must be finite")
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape[:2]

    def max_magnitude(self) -> float:
        return float(np.sqrt((self.grid ** 2).sum(axis=2)).max())

    @classmethod
    def zeros(cls, h, w, smoothing_sigma=2.0) -> "VelocityField":
        return cls(np.zeros((h, w, 2)), smoothing_sigma)


@dataclass(frozen=True)
class TransformChain:
    rigid: RigidParams = field(default_factory=RigidParams)
    affine: AffineParams = field(default_factory=AffineParams)
    diffeo: VelocityField | None = None

    def global_matrix(self, h: int, w: int) -> np.ndarray:
        """Homogeneous matrix of ``rigid o affine``."""
        return self.rigid.matrix(h, w) @ self.affine.matrix(h, w)

    def with_(self, **kw) -> "TransformChain":
        return replace(self, **kw)


# --- dense field machinery -----------------------------------------------

def _grid(h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return xx, yy


def sample_field(u: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear samples of an HxWx2 field, clamped at the border."""
    return _core.sample_field(u, xs, ys)


def compose_fields(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """Displacement of ``(id + outer) o (id + inner)``."""
    h, w = inner.shape[:2]
    xx, yy = _grid(h, w)
    return inner + sample_field(outer, xx + inner[..., 0], yy + inner[..., 1])


def exponentiate(v: VelocityField, steps: int = 6) -> DisplacementField:
    """Scaling and squaring: ``exp(v)`` as a displacement field."""
    if not 4 <= int(steps) <= 10:
        raise ValueError(f"steps must be in [4, 10], got {steps}")
    h, w = v.shape
    if v.max_magnitude() > velocity_bound(h, w):
        raise ValueError(
            f"velocity magnitude {v.max_magnitude():.3g} exceeds bound {velocity_bound(h, w):.3g}"
        )
    return DisplacementField(_core.square_field(v.grid / float(2 ** int(steps)), int(steps)))


def negate(v: VelocityField) -> VelocityField:
    return VelocityField(-v.grid, v.smoothing_sigma)


def _apply_homogeneous(mat, xs, ys):
    return (mat[0, 0] * xs + mat[0, 1] * ys + mat[0, 2],
            mat[1, 0] * xs + mat[1, 1] * ys + mat[1, 2])


def compose_chain(t: TransformChain, h: int, w: int, steps: int = 6) -> DisplacementField:
    """Dense displacement of ``rigid o affine o diff`` on an h x w grid."""
    xx, yy = _grid(h, w)
    if t.diffeo is not None:
        if t.diffeo.shape != (h, w):
            raise ValueError(f"velocity grid {t.diffeo.shape} does not match {(h, w)}")
        ud = exponentiate(t.diffeo, steps).grid
        qx, qy = xx + ud[..., 0], yy + ud[..., 1]
    else:
        qx, qy = xx, yy
    qx, qy = _apply_homogeneous(t.affine.matrix(h, w), qx, qy)
    qx, qy = _apply_homogeneous(t.rigid.matrix(h, w), qx, qy)
    return DisplacementField(np.stack([qx - xx, qy - yy], axis=-1))


def inverse_chain_field(t: TransformChain, h: int, w: int, steps: int = 6) -> DisplacementField:
    """Dense displacement of the inverse map ``diff^-1 o affine^-1 o rigid^-1``.

    The inverse velocity displacement is sampled at the globally mapped points.
    """
    xx, yy = _grid(h, w)
    ginv = np.linalg.inv(t.global_matrix(h, w))
    qx, qy = _apply_homogeneous(ginv, xx, yy)
    if t.diffeo is not None:
        uinv = exponentiate(negate(t.diffeo), steps).grid
        d = sample_field(uinv, qx, qy)
        qx, qy = qx + d[..., 0], qy + d[..., 1]
    return DisplacementField(np.stack([qx - xx, qy - yy], axis=-1))


def _as_array(img):
    return img.intensities if isinstance(img, Slice2D) else np.asarray(img, dtype=np.float64)


def warp_array(img: np.ndarray, u: np.ndarray, pad: float = 0.0) -> np.ndarray:
    """``img(p + u(p))``; zero beyond ``pad`` pixels outside the grid, edge value within."""
    h, w = img.shape
    xx, yy = _grid(h, w)
    return _core.sample_bilinear(img, xx + u[..., 0], yy + u[..., 1], False, pad)


def overlap_mask(u: np.ndarray, pad: float = FOOTPRINT) -> np.ndarray:
    """Pixels whose pulled-back location ``p + u(p)`` lies within ``pad`` of the image."""
    h, w = u.shape[:2]
    xx, yy = _grid(h, w)
    qx, qy = xx + u[..., 0], yy + u[..., 1]
    return (qx >= -pad) & (qx <= w - 1 + pad) & (qy >= -pad) & (qy <= h - 1 + pad)


def warp(img: Slice2D, field: DisplacementField) -> Slice2D:
    """Backward warp: ``out(p) = img(p + field(p))`` with zero fill."""
    if img.shape != field.shape:
        raise ValueError(f"dimension mismatch: image {img.shape} vs field {field.shape}")
    return img.with_intensities(warp_array(img.intensities, field.grid))


def warp_labels(labels: np.ndarray, field) -> np.ndarray:
    """Nearest-neighbour backward warp of an integer label grid (0 outside)."""
    u = field.grid if isinstance(field, DisplacementField) else np.asarray(field)
    h, w = labels.shape
    xx, yy = _grid(h, w)
    xs = np.rint(xx + u[..., 0]).astype(np.intp)
    ys = np.rint(yy + u[..., 1]).astype(np.intp)
    inside = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    out = np.zeros_like(labels)
    out[inside] = labels[ys[inside], xs[inside]]
    return out


def regularization_energy(v) -> float:
    """Diffusion energy: per component, mean squared forward differences along x and y, summed."""
    g = v.grid if isinstance(v, VelocityField) else np.asarray(v)
    dx = np.diff(g, axis=1)
    dy = np.diff(g, axis=0)
    total = 0.0
    for c in range(2):
        if dx.size:
            total += float(np.mean(dx[..., c] ** 2))
        if dy.size:
            total += float(np.mean(dy[..., c] ** 2))
    return total


def regularization_gradient(g: np.ndarray) -> np.ndarray:
    """Gradient of :func:`regularization_energy` with respect to the field values."""
    h, w = g.shape[:2]
    out = np.zeros_like(g)
    if w > 1:
        d = np.diff(g, axis=1) * (2.0 / (h * (w - 1)))
        out[:, 1:] += d
        out[:, :-1] -= d
    if h > 1:
        d = np.diff(g, axis=0) * (2.0 / ((h - 1) * w))
        out[1:] += d
        out[:-1] -= d
    return out


# Above this width a separable FFT convolution beats direct filtering.
FFT_SMOOTH_SIGMA = 8.0


def _gaussian_nearest(a: np.ndarray, sigma: float) -> np.ndarray:
    """Same result as ``gaussian_filter(a, sigma, mode="nearest")`` via FFT convolution."""
    r = int(4.0 * sigma + 0.5)
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * x * x / (sigma * sigma))
    k /= k.sum()
    p = np.pad(a, r, mode="edge")
    p = fftconvolve(p, k[None, :], mode="valid", axes=1)
    return fftconvolve(p, k[:, None], mode="valid", axes=0)


def smooth_field(g: np.ndarray, sigma: float) -> np.ndarray:
    out = np.empty_like(g)
    for c in range(2):
        if sigma >= FFT_SMOOTH_SIGMA:
            out[..., c] = _gaussian_nearest(g[..., c], sigma)
        else:
            out[..., c] = gaussian_filter(g[..., c], sigma, mode="nearest")
    return out


def jacobian_determinant(u: np.ndarray) -> np.ndarray:
    """Central-difference Jacobian determinant of ``id + u`` on interior pixels."""
    dux_dx = (u[1:-1, 2:, 0] - u[1:-1, :-2, 0]) / 2.0
    dux_dy = (u[2:, 1:-1, 0] - u[:-2, 1:-1, 0]) / 2.0
    duy_dx = (u[1:-1, 2:, 1] - u[1:-1, :-2, 1]) / 2.0
    duy_dy = (u[2:, 1:-1, 1] - u[:-2, 1:-1, 1]) / 2.0
    return (1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx


def write_field(path, field: DisplacementField | VelocityField, extra: dict | None = None) -> None:
    h, w = field.shape
    meta = {"height": h, "width": w, "channels": 2, "kind": type(field).__name__}
    if isinstance(field, VelocityField):
        meta["smoothing_sigma"] = field.smoothing_sigma
    if extra:
        meta.update(extra)
    write_raw(path, field.grid, meta)


def read_field(path):
    arr, meta = read_raw(path, shape_keys=("height", "width"))
    if meta.get("kind") == "VelocityField":
        return VelocityField(arr.astype(np.float64), float(meta.get("smoothing_sigma", 2.0)))
    return DisplacementField(arr.astype(np.float64))


def chain_to_dict(t: TransformChain) -> dict:
    return {
        "rigid": {
            "rotation": t.rigid.rotation,
            "translation": list(t.rigid.translation),
            "center": list(t.rigid.center) if t.rigid.center else None,
        },
        "affine": {
            "linear": [list(r) for r in t.affine.linear],
            "translation": list(t.affine.translation),
            "center": list(t.affine.center) if t.affine.center else None,
        },
        "velocity_max_px": t.diffeo.max_magnitude() if t.diffeo is not None else 0.0,
    }


def chain_from_dict(d: dict, diffeo: VelocityField | None = None) -> TransformChain:
    r, a = d["rigid"], d["affine"]
    return TransformChain(
        RigidParams(r["rotation"], tuple(r["translation"]), tuple(r["center"]) if r.get("center") else None),
        AffineParams(tuple(map(tuple, a["linear"])), tuple(a["translation"]),
                     tuple(a["center"]) if a.get("center") else None),
        diffeo,
    )
