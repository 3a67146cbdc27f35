"""Selective, order-constrained slice matching and registered-volume reconstruction.

The mapping sequences (T1m, T2m) are the sparse side: each of their N
co-acquired slice positions is matched into one of the K LGE slices. Position
j (0-based) searches LGE indices in ``(k_prev, K - N + j]``, so matches are
strictly increasing and enough LGE slices remain for the positions after it.
A candidate whose summed MI loss is above ``accept_threshold`` is rejected and
does not move ``k_prev``.
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .image import Modality, Slice2D, Volume, normalize_intensity
from .mi import MattesMetric
from .registration import RegistrationConfig, register_pair
from .transforms import FOOTPRINT, TransformChain, compose_chain, overlap_mask, warp, warp_array

DEFAULT_ACCEPT_THRESHOLD = -0.15
MATCHING_REGISTRATION = RegistrationConfig(diffeo_finest_level=1)


@dataclass(frozen=True)
class PairScore:
    fixed_index: int
    moving_index: int
    score: float
    chain: TransformChain


@dataclass(frozen=True)
class Match:
    fixed_index: int
    moving_index: int
    score: float
    chain: TransformChain


@dataclass
class MatchResult:
    matches: list
    unmatched_fixed: list
    accept_threshold: float
    rejected: list = field(default_factory=list)  # (fixed, moving, score)
    n_fixed: int = 0
    n_moving: int = 0

    def __post_init__(self):
        fixed = [m.fixed_index for m in self.matches]
        moving = [m.moving_index for m in self.matches]
        if any(b <= a for a, b in zip(fixed, fixed[1:])):
            raise ValueError("fixed indices must be strictly increasing")
        if any(b <= a for a, b in zip(moving, moving[1:])):
            raise ValueError("moving indices must be strictly increasing")

    def pairs(self) -> list[tuple[int, int]]:
        return [(m.fixed_index, m.moving_index) for m in self.matches]

    def to_dict(self) -> dict:
        return {
            "matches": [
                {"fixed": m.fixed_index, "moving": m.moving_index, "score": m.score}
                for m in self.matches
            ],
            "unmatched_fixed": list(self.unmatched_fixed),
            "rejected": [{"fixed": k, "moving": j, "score": sc} for k, j, sc in self.rejected],
            "threshold": self.accept_threshold,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _norm(s: Slice2D) -> Slice2D:
    return normalize_intensity(s)


def pair_score(lge: Slice2D, t1m: Slice2D, t2m: Slice2D,
               cfg: RegistrationConfig = MATCHING_REGISTRATION,
               fixed_index: int = 0, moving_index: int = 0) -> PairScore:
    """Register the co-acquired mapping pair to one LGE slice with a shared chain.

    The score is the sum of the two MI losses after registration (lower is
    better); the regularization term is not part of it.
    """
    f, m1, m2 = _norm(lge), _norm(t1m), _norm(t2m)
    res = register_pair(f, [m1, m2], cfg)
    h, w = f.shape
    u = compose_chain(res.chain, h, w, cfg.exp_steps)
    metric = MattesMetric(f.intensities, cfg.bins)
    inside = overlap_mask(u.grid)
    score = sum(metric.loss(warp_array(m.intensities, u.grid, FOOTPRINT), inside) for m in (m1, m2))
    return PairScore(fixed_index, moving_index, float(score), res.chain)


def _check_volumes(lge: Volume, t1m: Volume, t2m: Volume):
    if len(lge) == 0 or len(t1m) == 0 or len(t2m) == 0:
        raise ValueError("volumes must be non-empty")
    if len(t1m) != len(t2m):
        raise ValueError("T1m and T2m must have the same slice count")
    if len(t1m) > len(lge):
        raise ValueError(f"mapping slice count N={len(t1m)} exceeds LGE count K={len(lge)}")
    if lge.shape != t1m.shape or lge.shape != t2m.shape:
        raise ValueError("all volumes must share in-plane dimensions")


def candidate_window(j: int, prev: int, K: int, N: int) -> range:
    """LGE indices searched for mapping position ``j`` given the last accepted match."""
    return range(prev + 1, K - N + j + 1)


def greedy_matching(score, K: int, N: int, threshold: float = np.inf):
    """Sequential matching over a score callable or a K x N table.

    Returns ``(accepted, rejected)`` as lists of ``(k, j, score)``.
    """
    lookup = score if callable(score) else (lambda k, j: float(score[k][j]))
    accepted, rejected = [], []
    prev = -1
    for j in range(N):
        window = candidate_window(j, prev, K, N)
        if len(window) == 0:
            continue
        best_k, best_s = None, np.inf
        for k in window:
            s = lookup(k, j)
            if s < best_s:
                best_k, best_s = k, s
        if best_k is None:
            continue
        if best_s <= threshold:
            accepted.append((best_k, j, best_s))
            prev = best_k
        else:
            rejected.append((best_k, j, best_s))
    return accepted, rejected


def brute_force_matching(table) -> tuple[float, list[tuple[int, int]]]:
    """Global minimum of the summed score over strictly increasing assignments.

    ``table[k][j]`` scores LGE slice k against mapping position j. Dynamic
    program over (j, k); returns ``(total, [(k, j), ...])``.
    """
    t = np.asarray(table, dtype=np.float64)
    K, N = t.shape
    if N > K:
        raise ValueError("need N <= K")
    best = np.full((N, K), np.inf)
    arg = np.full((N, K), -1, dtype=np.int64)
    best[0] = t[:, 0]
    for j in range(1, N):
        run_min, run_arg = np.inf, -1
        for k in range(K):
            if k >= 1 and best[j - 1, k - 1] < run_min:
                run_min, run_arg = best[j - 1, k - 1], k - 1
            if run_arg >= 0:
                best[j, k] = run_min + t[k, j]
                arg[j, k] = run_arg
    k = int(np.argmin(best[N - 1]))
    total = float(best[N - 1, k])
    assignment = []
    for j in range(N - 1, -1, -1):
        assignment.append((k, j))
        k = int(arg[j, k])
    return total, assignment[::-1]


def _score_job(args):
    k, j, lge, t1, t2, cfg = args
    return pair_score(lge, t1, t2, cfg, k, j)


def select_matches(lge: Volume, t1m: Volume, t2m: Volume,
                   cfg: RegistrationConfig = MATCHING_REGISTRATION,
                   accept_threshold: float = DEFAULT_ACCEPT_THRESHOLD,
                   workers: int = 1) -> MatchResult:
    """Greedy order-constrained matching of mapping positions into LGE slices.

    With ``workers > 1`` every feasible (k, j) pair is scored up front in a
    process pool; the selection itself is sequential and gives the same result
    as lazy scoring.
    """
    _check_volumes(lge, t1m, t2m)
    K, N = len(lge), len(t1m)
    cache: dict[tuple[int, int], PairScore] = {}

    if workers > 1:
        jobs = [(k, j, lge[k], t1m[j], t2m[j], cfg)
                for j in range(N) for k in range(j, K - N + j + 1)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for ps in pool.map(_score_job, jobs):
                cache[(ps.fixed_index, ps.moving_index)] = ps

    def score(k, j):
        if (k, j) not in cache:
            cache[(k, j)] = pair_score(lge[k], t1m[j], t2m[j], cfg, k, j)
        return cache[(k, j)].score

    accepted, rejected = greedy_matching(score, K, N, accept_threshold)
    matches = [Match(k, j, s, cache[(k, j)].chain) for k, j, s in accepted]
    used = {m.fixed_index for m in matches}
    return MatchResult(
        matches=matches,
        unmatched_fixed=[k for k in range(K) if k not in used],
        accept_threshold=accept_threshold,
        rejected=rejected,
        n_fixed=K,
        n_moving=N,
    )


@dataclass
class RegisteredVolume:
    """Mapping slices warped onto LGE positions; ``None`` marks an absent slice."""

    slices: list
    slice_positions: list
    modality: Modality
    source_indices: list  # mapping index per position, or None

    def present(self) -> list[bool]:
        return [s is not None for s in self.slices]

    def array(self, shape) -> np.ndarray:
        out = np.zeros((len(self.slices),) + tuple(shape))
        for i, s in enumerate(self.slices):
            if s is not None:
                out[i] = s.intensities
        return out


def reconstruct_registered(matches: MatchResult, lge: Volume, t1m: Volume, t2m: Volume):
    """Warp each matched mapping slice with its chain and place it at its LGE position."""
    K, N = len(lge), len(t1m)
    h, w = lge.shape
    out = []
    for vol in (t1m, t2m):
        slices: list = [None] * K
        sources: list = [None] * K
        for m in matches.matches:
            if not (0 <= m.fixed_index < K and 0 <= m.moving_index < N):
                raise ValueError(f"match ({m.fixed_index}, {m.moving_index}) out of bounds")
            u = compose_chain(m.chain, h, w)
            slices[m.fixed_index] = warp(vol[m.moving_index], u)
            sources[m.fixed_index] = m.moving_index
        out.append(RegisteredVolume(slices, list(lge.slice_positions), vol.modality, sources))
    return out[0], out[1]
