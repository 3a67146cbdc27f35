"""Overlap and boundary-distance metrics for label masks.

Dice is reported in percent, HD95 in pixels. Both work per 2D slice; volumes
are summarized by the mean over slices where the metric is defined.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .image import Label, Mask2D

DEFAULT_LABELS = (Label.MYO, Label.ME, Label.MI)


class UndefinedMetricError(ValueError):
    """The metric has no value for these inputs (e.g. an empty mask for HD95)."""


def _regions(a: Mask2D, b: Mask2D, label):
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a.region(label), b.region(label)


def dice(a: Mask2D, b: Mask2D, label) -> float:
    """Dice overlap in percent; two empty regions count as full agreement (100)."""
    ra, rb = _regions(a, b, label)
    total = int(ra.sum()) + int(rb.sum())
    if total == 0:
        return 100.0
    return 200.0 * int(np.logical_and(ra, rb).sum()) / total


def boundary(region: np.ndarray) -> np.ndarray:
    """Pixels of ``region`` with at least one 4-neighbour outside it (image edge counts as outside)."""
    r = np.pad(np.asarray(region, dtype=bool), 1)
    inner = r[1:-1, 1:-1]
    interior = r[:-2, 1:-1] & r[2:, 1:-1] & r[1:-1, :-2] & r[1:-1, 2:]
    return inner & ~interior


def boundary_distances(ra: np.ndarray, rb: np.ndarray) -> np.ndarray:
    """Pooled directed nearest-boundary distances, A->B followed by B->A."""
    pa = np.argwhere(boundary(ra)).astype(np.float64)
    pb = np.argwhere(boundary(rb)).astype(np.float64)
    if len(pa) == 0 or len(pb) == 0:
        raise UndefinedMetricError("HD95 is undefined when either mask is empty")
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return np.concatenate([d_ab, d_ba])


def hd95(a: Mask2D, b: Mask2D, label) -> float:
    """95th percentile (linear interpolation) of pooled symmetric boundary distances."""
    ra, rb = _regions(a, b, label)
    return float(np.percentile(boundary_distances(ra, rb), 95))


def hausdorff(a: Mask2D, b: Mask2D, label) -> float:
    ra, rb = _regions(a, b, label)
    return float(boundary_distances(ra, rb).max())


@dataclass
class MetricReport:
    """Per-label Dice (%) and HD95 (px); ``None`` marks an undefined HD95."""

    labels: list
    dice: dict = field(default_factory=dict)
    hd95: dict = field(default_factory=dict)
    per_slice: list = field(default_factory=list)

    def __post_init__(self):
        for v in self.dice.values():
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"dice {v} outside [0, 100]")
        for v in self.hd95.values():
            if v is not None and v < 0:
                raise ValueError("hd95 must be non-negative")

    def to_dict(self) -> dict:
        names = {int(l): Label(int(l)).name for l in self.labels}
        return {
            "labels": [names[int(l)] for l in self.labels],
            "dice_percent": {names[int(l)]: self.dice[l] for l in self.labels},
            "hd95_px": {names[int(l)]: self.hd95[l] for l in self.labels},
            "per_slice": self.per_slice,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _label_key(label):
    return int(label)


def evaluate(pred, ref, labels=DEFAULT_LABELS) -> MetricReport:
    """Compare two equally long mask sequences slice by slice and average.

    Dice averages over all slices. HD95 averages over slices where it is
    defined; a label with no defined slice reports ``None``.
    """
    pred, ref = list(pred), list(ref)
    if len(pred) != len(ref):
        raise ValueError(f"slice counts differ: {len(pred)} vs {len(ref)}")
    if not pred:
        raise ValueError("no slices to evaluate")
    keys = [_label_key(l) for l in labels]
    dices = {k: [] for k in keys}
    hds = {k: [] for k in keys}
    rows = []
    for i, (a, b) in enumerate(zip(pred, ref)):
        row = {"slice": i, "dice_percent": {}, "hd95_px": {}}
        for k in keys:
            name = Label(k).name
            d = dice(a, b, k)
            dices[k].append(d)
            row["dice_percent"][name] = d
            try:
                h = hd95(a, b, k)
            except UndefinedMetricError:
                h = None
            else:
                hds[k].append(h)
            row["hd95_px"][name] = h
        rows.append(row)
    return MetricReport(
        labels=keys,
        dice={k: float(np.mean(dices[k])) for k in keys},
        hd95={k: (float(np.mean(hds[k])) if hds[k] else None) for k in keys},
        per_slice=rows,
    )
