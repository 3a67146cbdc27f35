"""Mattes mutual information between a fixed and a (warped) moving slice.

The joint histogram uses a zero-order (nearest-bin) window on the fixed axis and
a cubic B-spline Parzen window on the moving axis. Bin ``b`` covers
``[b/B, (b+1)/B)``; B-spline taps falling outside the bin range are folded back
with half-sample symmetry so every pixel deposits unit mass.

Sign convention: ``mmi_loss`` returns ``-MI`` in nats. Lower is better
everywhere in the package.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _core
from .image import Slice2D

DEFAULT_BINS = 32
MIN_BINS, MAX_BINS = 8, 128
MIN_OVERLAP = 0.25  # fraction of pixels that must land inside the moving image


@dataclass(frozen=True)
class JointHistogram:
    joint: np.ndarray
    marginal_fixed: np.ndarray
    marginal_moving: np.ndarray

    @property
    def bins(self) -> int:
        return self.joint.shape[0]

    def mutual_information(self) -> float:
        return _mi_from_joint(self.joint, self.marginal_fixed, self.marginal_moving)


def _values(img) -> np.ndarray:
    return img.intensities if isinstance(img, Slice2D) else np.asarray(img, dtype=np.float64)


def _check_bins(bins):
    if not (MIN_BINS <= int(bins) <= MAX_BINS):
        raise ValueError(f"bins must be in [{MIN_BINS}, {MAX_BINS}], got {bins}")


def fixed_bins(values: np.ndarray, bins: int) -> np.ndarray:
    """Nearest-bin index of each fixed intensity (values clipped to [0, 1])."""
    v = np.clip(np.asarray(values, dtype=np.float64).ravel(), 0.0, 1.0)
    return np.minimum((v * bins).astype(np.int64), bins - 1)


def _normalize(counts: np.ndarray) -> JointHistogram:
    joint = counts / counts.sum()
    return JointHistogram(joint, joint.sum(axis=1), joint.sum(axis=0))


def build_joint_histogram(fixed, moving, bins: int = DEFAULT_BINS, window: str = "bspline") -> JointHistogram:
    """Parzen-windowed joint distribution of (fixed, moving) intensities.

    ``window`` selects the moving-axis window: ``"bspline"`` (Mattes) or
    ``"nearest"``. Both images must already be scaled to [0, 1].
    """
    _check_bins(bins)
    f, m = _values(fixed), _values(moving)
    if f.shape != m.shape:
        raise ValueError(f"dimension mismatch: fixed {f.shape} vs moving {m.shape}")
    if window not in ("bspline", "nearest"):
        raise ValueError(f"unknown window {window!r}")
    counts = _core.joint_histogram(fixed_bins(f, bins), m.ravel(), int(bins), window == "bspline")
    return _normalize(counts)


def _mi_from_joint(joint, pf, pm) -> float:
    outer = np.outer(pf, pm)
    nz = (joint > 0) & (outer > 0)
    return float(np.sum(joint[nz] * np.log(joint[nz] / outer[nz])))


def mmi_loss(fixed, moving, bins: int = DEFAULT_BINS, window: str = "bspline") -> float:
    """Negative Mattes mutual information in nats (0 log 0 = 0)."""
    return -build_joint_histogram(fixed, moving, bins, window).mutual_information()


class MattesMetric:
    """MI evaluator with the fixed image binned once.

    Used inside optimizer loops where the same fixed image is compared against
    many warped versions of a moving image. An optional boolean ``mask``
    restricts the estimate to pixels whose warped location fell inside the
    moving image; below ``MIN_OVERLAP`` of the pixels the loss is ``inf``.
    """

    def __init__(self, fixed: np.ndarray, bins: int = DEFAULT_BINS):
        _check_bins(bins)
        self.bins = int(bins)
        self.shape = np.shape(fixed)
        self.fbins = fixed_bins(fixed, self.bins)

    def _too_small(self, mask) -> bool:
        return mask is not None and np.count_nonzero(mask) < MIN_OVERLAP * self.fbins.size

    def histogram(self, moving: np.ndarray, mask=None) -> JointHistogram:
        counts = _core.joint_histogram(self.fbins, np.ravel(moving), self.bins, True, mask)
        return _normalize(counts)

    def loss(self, moving: np.ndarray, mask=None) -> float:
        if self._too_small(mask):
            return math.inf
        return -self.histogram(moving, mask).mutual_information()

    def loss_and_gradient(self, moving: np.ndarray, mask=None) -> tuple[float, np.ndarray]:
        """Loss and its derivative with respect to each moving intensity (zero outside ``mask``)."""
        if self._too_small(mask):
            return math.inf, np.zeros(self.shape)
        h = self.histogram(moving, mask)
        joint, pm = h.joint, h.marginal_moving
        with np.errstate(divide="ignore", invalid="ignore"):
            table = np.where((joint > 0) & (pm[None, :] > 0), np.log(joint / pm[None, :]), 0.0)
        dmi = _core.mi_gradient(self.fbins, np.ravel(moving), self.bins, table, mask)
        n = self.fbins.size if mask is None else np.count_nonzero(mask)
        return -h.mutual_information(), (-dmi / n).reshape(self.shape)


def plugin_entropy(values: np.ndarray, bins: int = DEFAULT_BINS) -> float:
    """Entropy (nats) of the nearest-bin histogram of ``values``."""
    counts = np.bincount(fixed_bins(values, bins), minlength=bins).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))
