"""Synthetic multi-sequence cardiac phantom with known ground truth.

Each LGE slice shows a torso with a per-slice tissue texture, a left-ventricle
annulus that narrows from base to apex, a right-ventricle crescent, spine and
(apically) liver, plus an edema arc and optionally an infarct blob inside the
myocardium. Mapping slices are remapped, transformed and re-noised copies of a
subset of LGE slices.

Ground-truth chains are alignment transforms: the registered chain ``phi``
should satisfy ``lge(p) ~ mapping(phi(p))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .image import Label, Mask2D, Modality, Volume
from .transforms import (
    AffineParams,
    RigidParams,
    TransformChain,
    VelocityField,
    compose_chain,
    inverse_chain_field,
    velocity_bound,
    warp_array,
    warp_labels,
)

SLICE_GAP_MM = 10.0


@dataclass(frozen=True)
class PhantomConfig:
    K: int = 8
    N: int = 3
    size: int = 384
    rotation_deg: float = 5.0
    translation_px: float = 5.0
    scale: float = 0.04
    deformation: float = 2.0
    noise: float = 0.02
    texture: float = 0.06
    remap: bool = True
    mi_fraction: float = 0.5
    correspondence: tuple | None = None

    def __post_init__(self):
        if not 1 <= self.N <= self.K:
            raise ValueError(f"need 1 <= N <= K, got N={self.N}, K={self.K}")
        if self.size < 64:
            raise ValueError(f"size must be >= 64, got {self.size}")
        for name in ("rotation_deg", "translation_px", "scale", "deformation", "noise", "texture"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.mi_fraction <= 1:
            raise ValueError("mi_fraction must be in [0, 1]")
        if self.scale >= 0.5:
            raise ValueError("scale must be < 0.5")
        if self.correspondence is not None:
            c = tuple(int(k) for k in self.correspondence)
            if len(c) != self.N or any(b <= a for a, b in zip(c, c[1:])) or c[0] < 0 or c[-1] >= self.K:
                raise ValueError("correspondence must be N strictly increasing LGE indices")
            object.__setattr__(self, "correspondence", c)


@dataclass
class PhantomCase:
    lge: Volume
    t1m: Volume
    t2m: Volume
    gt_chains: list
    gt_correspondence: list  # [(lge index, mapping index)]
    masks: list  # per LGE slice
    mapping_masks: list  # per mapping slice
    seed: int
    has_mi: bool
    config: PhantomConfig = field(default_factory=PhantomConfig)

    def mapping_index_of(self, k: int):
        for lk, j in self.gt_correspondence:
            if lk == k:
                return j
        return None


def _smooth_noise(rng, shape, sigma):
    f = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def _ellipse(xx, yy, cx, cy, ax, ay):
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0


def _draw_slice(k, K, S, rng, texture, mi_slices):
    """Clean LGE intensities and labels for LGE slice k."""
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    frac = k / max(K - 1, 1)  # 0 at base, 1 at apex
    img = np.zeros((S, S))
    labels = np.zeros((S, S), dtype=np.uint8)

    torso = _ellipse(xx, yy, 0.5 * S, 0.52 * S, 0.42 * S, 0.32 * S)
    tex = _smooth_noise(rng, (S, S), 0.012 * S)
    img[torso] = 0.35 + texture * tex[torso]

    spine = _ellipse(xx, yy, 0.55 * S, 0.78 * S, 0.045 * S, 0.04 * S)
    img[spine] = 0.75

    if frac > 0.4:
        grow = (frac - 0.4) / 0.6
        liver = _ellipse(xx, yy, 0.3 * S, 0.68 * S, (0.06 + 0.1 * grow) * S, (0.05 + 0.06 * grow) * S)
        img[liver & torso] = 0.45 + 0.5 * texture * tex[liver & torso]

    cx = (0.53 + 0.02 * frac) * S
    cy = (0.47 + 0.01 * math.sin(3.0 * frac)) * S
    r_out = (0.15 - 0.07 * frac) * S
    thick = 0.032 * S
    r_in = r_out - thick
    rr = np.hypot(xx - cx, yy - cy)
    theta = np.arctan2(yy - cy, xx - cx)

    shrink = 1.0 - 0.5 * frac
    rv = _ellipse(xx, yy, cx - r_out - 0.05 * S * shrink, cy + 0.01 * S, 0.08 * S * shrink, 0.13 * S * shrink)
    img[rv & (rr > r_out + 2)] = 0.5

    img[rr <= r_in] = 0.55
    myo = (rr > r_in) & (rr <= r_out)
    img[myo] = 0.08
    labels[myo] = Label.MYO

    # edema arc, angular position drifting with the slice index
    arc_center = -0.6 + 1.7 * frac
    dang = np.angle(np.exp(1j * (theta - arc_center)))
    me = myo & (np.abs(dang) < math.radians(32))
    img[me] = 0.3
    labels[me] = Label.ME

    if k in mi_slices:
        ang = 2.2 - 0.8 * frac
        bx = cx + (r_in + 0.5 * thick) * math.cos(ang)
        by = cy + (r_in + 0.5 * thick) * math.sin(ang)
        blob = myo & (np.hypot(xx - bx, yy - by) <= 0.035 * S)
        img[blob] = 0.9
        labels[blob] = Label.MI
    return img, labels


def _remap(img, gamma, gain, offset):
    return gain * np.clip(img, 0.0, None) ** gamma + offset


REMAPS = {Modality.T1m: (0.7, 0.8, 0.1), Modality.T2m: (1.6, 0.9, 0.05)}


def _random_chain(rng, cfg: PhantomConfig, S: int, myo_region: np.ndarray) -> TransformChain:
    rot = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    t = rng.uniform(-cfg.translation_px, cfg.translation_px, size=2)
    rigid = RigidParams(rot, (float(t[0]), float(t[1])))
    sx, sy = 1.0 + rng.uniform(-cfg.scale, cfg.scale, size=2)
    shear = rng.uniform(-cfg.scale, cfg.scale) * 0.5
    affine = AffineParams(((sx, shear), (0.0, sy)), (0.0, 0.0))
    diffeo = None
    if cfg.deformation > 0:
        g = np.stack([_smooth_noise(rng, (S, S), S / 8.0) for _ in range(2)], axis=-1)
        mag = np.sqrt((g ** 2).sum(axis=2))
        ref = mag[myo_region].mean() if myo_region.any() else mag.mean()
        g *= cfg.deformation / ref
        bound = 0.9 * velocity_bound(S, S)
        peak = np.sqrt((g ** 2).sum(axis=2)).max()
        if peak > bound:
            g *= bound / peak
        diffeo = VelocityField(g)
    return TransformChain(rigid, affine, diffeo)


def gen_phantom(seed: int = 0, cfg: PhantomConfig | None = None) -> PhantomCase:
    """Deterministic phantom for ``seed``."""
    cfg = cfg or PhantomConfig()
    rng = np.random.default_rng(seed)
    K, N, S = cfg.K, cfg.N, cfg.size

    has_mi = bool(rng.random() < cfg.mi_fraction)
    mi_slices = set()
    if has_mi:
        start = int(rng.integers(0, max(K - 2, 1)))
        mi_slices = set(range(start, min(start + 3, K)))

    if cfg.correspondence is not None:
        corr = list(cfg.correspondence)
    else:
        corr = sorted(int(k) for k in rng.choice(K, size=N, replace=False))

    clean, masks = [], []
    for k in range(K):
        img, labels = _draw_slice(k, K, S, rng, cfg.texture, mi_slices)
        clean.append(img)
        masks.append(Mask2D(labels))

    lge = [c + cfg.noise * rng.standard_normal((S, S)) if cfg.noise > 0 else c.copy() for c in clean]
    positions = [SLICE_GAP_MM * k for k in range(K)]

    chains, t1, t2, map_masks = [], [], [], []
    for j, k in enumerate(corr):
        myo = masks[k].region((Label.MYO, Label.ME, Label.MI))
        chain = _random_chain(rng, cfg, S, myo)
        chains.append(chain)
        inv = inverse_chain_field(chain, S, S).grid
        moved = warp_array(clean[k], inv)
        for mod, out in ((Modality.T1m, t1), (Modality.T2m, t2)):
            img = _remap(moved, *REMAPS[mod]) if cfg.remap else moved
            if cfg.noise > 0:
                img = img + cfg.noise * rng.standard_normal((S, S))
            out.append(img)
        map_masks.append(Mask2D(warp_labels(masks[k].labels, inv)))

    map_pos = [positions[k] for k in corr]
    return PhantomCase(
        lge=Volume.from_array(lge, positions, 1.0, Modality.LGE),
        t1m=Volume.from_array(t1, map_pos, 1.0, Modality.T1m),
        t2m=Volume.from_array(t2, map_pos, 1.0, Modality.T2m),
        gt_chains=chains,
        gt_correspondence=[(k, j) for j, k in enumerate(corr)],
        masks=masks,
        mapping_masks=map_masks,
        seed=seed,
        has_mi=has_mi,
        config=cfg,
    )


def gt_displacement(case: PhantomCase, j: int) -> np.ndarray:
    """Dense ground-truth alignment displacement for mapping slice ``j``."""
    S = case.config.size
    return compose_chain(case.gt_chains[j], S, S).grid
