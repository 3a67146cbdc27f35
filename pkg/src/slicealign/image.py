"""Image containers, sampling and grid utilities, and the raw+JSON volume format."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import _core


class Modality(str, Enum):
    LGE = "LGE"
    T1m = "T1m"
    T2m = "T2m"


class Label(int, Enum):
    BACKGROUND = 0
    MYO = 1
    ME = 2
    MI = 3


MIN_SIZE = 8


@dataclass(frozen=True)
class Slice2D:
    """A single 2D intensity image with in-plane pixel spacing in mm.

    ``intensities`` is a (height, width) float64 array; x indexes columns and
    y indexes rows throughout the package.
    """

    intensities: np.ndarray
    pixel_spacing: float = 1.0
    modality: Modality = Modality.LGE

    def __post_init__(self):
        arr = np.array(self.intensities, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"intensities must be 2D, got shape {arr.shape}")
        if arr.shape[0] < MIN_SIZE or arr.shape[1] < MIN_SIZE:
            raise ValueError(f"slice must be at least {MIN_SIZE}x{MIN_SIZE}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("intensities must be finite")
        if not (self.pixel_spacing > 0 and math.isfinite(self.pixel_spacing)):
            raise ValueError(f"pixel_spacing must be positive, got {self.pixel_spacing}")
        arr.setflags(write=False)
        object.__setattr__(self, "intensities", arr)
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def width(self) -> int:
        return self.intensities.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.intensities.shape

    def with_intensities(self, values) -> "Slice2D":
        return Slice2D(values, self.pixel_spacing, self.modality)


@dataclass(frozen=True)
class Mask2D:
    labels: np.ndarray

    def __post_init__(self):
        arr = np.array(self.labels, dtype=np.uint8)
        if arr.ndim != 2:
            raise ValueError(f"labels must be 2D, got shape {arr.shape}")
        if arr.size and arr.max() > max(Label):
            raise ValueError("labels must be in {0, 1, 2, 3}")
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def region(self, label) -> np.ndarray:
        """Boolean mask of one label or of a collection of labels."""
        if isinstance(label, (int, np.integer)):
            return self.labels == int(label)
        return np.isin(self.labels, [int(v) for v in label])


@dataclass(frozen=True)
class Volume:
    """Ordered stack of equally sized slices with strictly increasing positions (mm)."""

    slices: tuple
    slice_positions: tuple
    modality: Modality = Modality.LGE

    def __post_init__(self):
        slices = tuple(self.slices)
        positions = tuple(float(p) for p in self.slice_positions)
        if not slices:
            raise ValueError("volume needs at least one slice")
        if len(positions) != len(slices):
            raise ValueError("one position per slice required")
        shape = slices[0].shape
        if any(s.shape != shape for s in slices):
            raise ValueError("all slices must share dimensions")
        if any(b <= a for a, b in zip(positions, positions[1:])):
            raise ValueError("slice positions must be strictly increasing")
        object.__setattr__(self, "slices", slices)
        object.__setattr__(self, "slice_positions", positions)
        object.__setattr__(self, "modality", Modality(self.modality))

    def __len__(self):
        return len(self.slices)

    def __getitem__(self, k) -> Slice2D:
        return self.slices[k]

    @property
    def shape(self) -> tuple[int, int]:
        return self.slices[0].shape

    @property
    def spacing(self) -> float:
        return self.slices[0].pixel_spacing

    def array(self) -> np.ndarray:
        return np.stack([s.intensities for s in self.slices])

    @classmethod
    def from_array(cls, arr, positions, spacing=1.0, modality=Modality.LGE) -> "Volume":
        return cls(tuple(Slice2D(a, spacing, modality) for a in arr), tuple(positions), modality)


def _check_coord(v):
    if not math.isfinite(v):
        raise ValueError(f"sample coordinate must be finite, got {v}")


def bilinear_sample(img: Slice2D, x: float, y: float) -> float:
    """Bilinear value at column ``x``, row ``y``; 0 outside the pixel grid."""
    _check_coord(x)
    _check_coord(y)
    out = _core.sample_bilinear(img.intensities, np.array([x]), np.array([y]))
    return float(out[0])


def normalize_intensity(img: Slice2D, lo_pct: float = 0.5, hi_pct: float = 99.5) -> Slice2D:
    """Clip to the given percentile range, then min-max scale to [0, 1].

    Bounds are order statistics (lower for the low bound, higher for the high
    bound), which makes the map exactly idempotent. Constant images map to zeros.
    """
    a = img.intensities
    lo = np.percentile(a, lo_pct, method="lower")
    hi = np.percentile(a, hi_pct, method="higher")
    if not hi > lo:
        return img.with_intensities(np.zeros_like(a))
    out = (np.clip(a, lo, hi) - lo) / (hi - lo)
    return img.with_intensities(out)


def _pad_crop_1d(n_in, n_out):
    # returns (src_start, dst_start, length)
    if n_in >= n_out:
        return (n_in - n_out) // 2, 0, n_out
    return 0, (n_out - n_in) // 2, n_in


def standardize_grid(img: Slice2D, target=(384, 384)) -> Slice2D:
    """Center crop or symmetric zero pad to ``target`` (height, width).

    Odd remainders go to the trailing side; spacing is unchanged.
    """
    th, tw = int(target[0]), int(target[1])
    if th < MIN_SIZE or tw < MIN_SIZE:
        raise ValueError(f"target must be at least {MIN_SIZE}x{MIN_SIZE}")
    sy, dy, ly = _pad_crop_1d(img.height, th)
    sx, dx, lx = _pad_crop_1d(img.width, tw)
    out = np.zeros((th, tw), dtype=np.float64)
    out[dy:dy + ly, dx:dx + lx] = img.intensities[sy:sy + ly, sx:sx + lx]
    return img.with_intensities(out)


def standardize_mask(mask: Mask2D, target=(384, 384)) -> Mask2D:
    th, tw = int(target[0]), int(target[1])
    h, w = mask.shape
    sy, dy, ly = _pad_crop_1d(h, th)
    sx, dx, lx = _pad_crop_1d(w, tw)
    out = np.zeros((th, tw), dtype=np.uint8)
    out[dy:dy + ly, dx:dx + lx] = mask.labels[sy:sy + ly, sx:sx + lx]
    return Mask2D(out)


def downsample(a: np.ndarray) -> np.ndarray:
    """Gaussian pre-blur (sigma 1 px) then keep every second pixel."""
    from scipy.ndimage import gaussian_filter

    return gaussian_filter(a, 1.0, mode="constant")[::2, ::2]


# --- raw + JSON sidecar format -------------------------------------------

def _sidecar(path) -> Path:
    return Path(path).with_suffix(".json")


def _raw(path) -> Path:
    return Path(path).with_suffix(".raw")


def write_raw(path, data: np.ndarray, meta: dict, dtype="<f4") -> None:
    """Write ``data`` as little-endian raw bytes plus a sorted-key JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(data, dtype=dtype)
    _raw(path).write_bytes(arr.tobytes(order="C"))
    meta = dict(meta)
    meta["dtype"] = np.dtype(dtype).str
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_raw(path, shape_keys=("slices", "height", "width")) -> tuple[np.ndarray, dict]:
    path = Path(path)
    try:
        meta = json.loads(_sidecar(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read sidecar for {path}: {exc}") from exc
    try:
        shape = tuple(int(meta[k]) for k in shape_keys if k in meta)
        dtype = np.dtype(meta.get("dtype", "<f4"))
        if "channels" in meta:
            shape = shape + (int(meta["channels"]),)
        raw = _raw(path).read_bytes()
    except (OSError, KeyError, TypeError) as exc:
        raise ValueError(f"malformed raw file {path}: {exc}") from exc
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(f"{_raw(path)} has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy(), meta


def write_volume(path, vol: Volume, extra: dict | None = None) -> None:
    h, w = vol.shape
    meta = {
        "height": h,
        "width": w,
        "slices": len(vol),
        "spacing_mm": vol.spacing,
        "slice_positions_mm": list(vol.slice_positions),
        "modality": vol.modality.value,
    }
    if extra:
        meta.update(extra)
    write_raw(path, vol.array(), meta)


def read_volume(path) -> Volume:
    arr, meta = read_raw(path)
    try:
        spacing = float(meta["spacing_mm"])
        positions = [float(p) for p in meta["slice_positions_mm"]]
        modality = Modality(meta["modality"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ValueError(f"malformed volume sidecar for {path}: {exc}") from exc
    if not all(np.isfinite(arr.ravel())):
        raise ValueError(f"{path} contains non-finite values")
    return Volume.from_array(arr.astype(np.float64), positions, spacing, modality)


def write_masks(path, masks, positions=None) -> None:
    arr = np.stack([m.labels for m in masks])
    meta = {"height": arr.shape[1], "width": arr.shape[2], "slices": arr.shape[0], "kind": "mask"}
    if positions is not None:
        meta["slice_positions_mm"] = list(positions)
    write_raw(path, arr, meta, dtype="u1")


def read_masks(path) -> list[Mask2D]:
    arr, meta = read_raw(path)
    if meta.get("kind") != "mask":
        raise ValueError(f"{path} is not a mask stack")
    return [Mask2D(a) for a in arr]


def write_pgm(path, img: np.ndarray) -> None:
    """8-bit binary PGM of an image scaled from [0, 1]."""
    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    b = np.round(a * 255.0).astype(np.uint8)
    h, w = b.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + b.tobytes())


def checkerboard(a: np.ndarray, b: np.ndarray, tile: int = 32) -> np.ndarray:
    yy, xx = np.indices(a.shape)
    pick = ((yy // tile) + (xx // tile)) % 2 == 0
    return np.where(pick, a, b)
