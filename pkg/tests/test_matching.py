import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slicealign.image import Label, Mask2D, Modality, Slice2D, Volume, normalize_intensity
from slicealign.matching import (
    DEFAULT_ACCEPT_THRESHOLD,
    Match,
    MatchResult,
    brute_force_matching,
    candidate_window,
    greedy_matching,
    pair_score,
    reconstruct_registered,
    select_matches,
)
from slicealign.metrics import dice
from slicealign.mi import mmi_loss
from slicealign.phantom import PhantomConfig, gen_phantom
from slicealign.transforms import TransformChain, compose_chain, warp, warp_labels

MYO = (Label.MYO, Label.ME, Label.MI)


def enumerate_best(t):
    """Exhaustive oracle over all strictly increasing row choices."""
    K, N = t.shape
    best = min(itertools.combinations(range(K), N), key=lambda ks: sum(t[k, j] for j, k in enumerate(ks)))
    return sum(t[k, j] for j, k in enumerate(best)), [(k, j) for j, k in enumerate(best)]


def greedy_total(t):
    acc, rej = greedy_matching(t, *t.shape)
    assert not rej
    return sum(s for _, _, s in acc), [(k, j) for k, j, _ in acc]


def noise_volume(n, size, seed, modality=Modality.T1m):
    r = np.random.default_rng(seed)
    return Volume.from_array(r.random((n, size, size)), [10.0 * i for i in range(n)], 1.0, modality)


@pytest.fixture(scope="module")
def matched(small_case):
    return select_matches(small_case.lge, small_case.t1m, small_case.t2m)


class TestTables:
    def test_single_cell(self):
        assert brute_force_matching([[0.3]]) == (0.3, [(0, 0)])
        assert greedy_total(np.array([[0.3]])) == (0.3, [(0, 0)])

    def test_four_by_two_example(self):
        t = np.array([[-0.9, 0.1], [0.0, -0.2], [0.2, -0.8], [0.3, 0.0]])
        total, assign = brute_force_matching(t)
        assert assign == [(0, 0), (2, 1)]
        assert total == pytest.approx(-1.7)
        assert enumerate_best(t)[1] == assign
        assert greedy_total(t)[1] == assign

    def test_greedy_can_be_suboptimal(self):
        # position 0 grabs row 2, which leaves only row 3 for position 1
        t = np.array([[0.0, 9.0], [0.0, 9.0], [-1.0, -10.0], [5.0, 5.0]])
        g_total, g_assign = greedy_total(t)
        d_total, d_assign = brute_force_matching(t)
        assert g_assign == [(2, 0), (3, 1)]
        assert d_assign == [(0, 0), (2, 1)]
        assert d_total < g_total

    def test_window(self):
        assert list(candidate_window(0, -1, 8, 3)) == [0, 1, 2, 3, 4, 5]
        assert list(candidate_window(1, 2, 8, 3)) == [3, 4, 5, 6]
        assert list(candidate_window(2, 6, 8, 3)) == [7]
        assert list(candidate_window(2, 7, 8, 3)) == []

    def test_rejection_keeps_previous_index(self):
        t = np.array([[0.5, -1.0], [0.4, -1.0], [0.9, 0.0]])
        acc, rej = greedy_matching(t, 3, 2, threshold=0.0)
        assert rej == [(1, 0, 0.4)]
        # position 1 may still use row 0 because nothing was accepted before it
        assert acc == [(0, 1, -1.0)]

    def test_dp_rejects_wide_table(self):
        with pytest.raises(ValueError):
            brute_force_matching(np.zeros((2, 3)))

    @settings(max_examples=300, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 31))
    def test_greedy_never_beats_oracle(self, K, N, seed):
        if N > K:
            K, N = N, K
        t = np.random.default_rng(seed).normal(size=(K, N))
        d_total, d_assign = brute_force_matching(t)
        e_total, _ = enumerate_best(t)
        assert d_total == pytest.approx(e_total, abs=1e-12)
        g_total, g_assign = greedy_total(t)
        assert g_total >= d_total - 1e-12
        ks = [k for k, _ in g_assign]
        assert all(b > a for a, b in zip(ks, ks[1:]))
        assert all(k <= K - N + j for k, j in g_assign)
        if g_assign == d_assign:
            assert g_total == pytest.approx(d_total, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 31))
    def test_equal_on_diagonal_dominant_tables(self, K, N, seed):
        if N > K:
            K, N = N, K
        r = np.random.default_rng(seed)
        rows = sorted(r.choice(K, N, replace=False))
        t = r.uniform(0.0, 1.0, size=(K, N))
        for j, k in enumerate(rows):
            t[k, j] = -1.0 - r.random()
        d_total, d_assign = brute_force_matching(t)
        g_total, g_assign = greedy_total(t)
        assert g_assign == d_assign == [(k, j) for j, k in enumerate(rows)]
        assert g_total == pytest.approx(d_total, abs=1e-12)


class TestResult:
    def test_order_enforced(self):
        c = TransformChain()
        with pytest.raises(ValueError):
            MatchResult([Match(3, 0, -1.0, c), Match(2, 1, -1.0, c)], [], -0.15)
        with pytest.raises(ValueError):
            MatchResult([Match(1, 1, -1.0, c), Match(2, 1, -1.0, c)], [], -0.15)

    def test_json(self):
        c = TransformChain()
        r = MatchResult([Match(1, 0, -1.25, c)], [0, 2], -0.15)
        d = json.loads(r.to_json())
        assert d["matches"] == [{"fixed": 1, "moving": 0, "score": -1.25}]
        assert d["unmatched_fixed"] == [0, 2] and d["threshold"] == -0.15


class TestScores:
    def test_identical_slices_score_twice_self_loss(self, lge128):
        ps = pair_score(lge128, lge128, lge128)
        # twice the self loss of the windowed estimator; that estimator rewards a
        # slight sub-pixel warp of a self pair, so registration lands a bit lower
        assert ps.score == pytest.approx(2 * mmi_loss(lge128, lge128), abs=0.05)
        assert ps.score < 0

    def test_true_source_beats_other_section(self, small_case):
        k, j = small_case.gt_correspondence[1]
        other = (k + 4) % len(small_case.lge)
        good = pair_score(small_case.lge[k], small_case.t1m[j], small_case.t2m[j]).score
        bad = pair_score(small_case.lge[other], small_case.t1m[j], small_case.t2m[j]).score
        assert good < bad

    def test_noise_scores_near_zero(self, lge128):
        r = np.random.default_rng(3)
        n1, n2 = (Slice2D(r.random(lge128.shape)) for _ in range(2))
        assert pair_score(lge128, n1, n2).score >= -0.1


class TestSelect:
    def test_phantom_correspondence(self, small_case, matched):
        assert matched.pairs() == small_case.gt_correspondence
        assert matched.unmatched_fixed == [k for k in range(8) if k not in {k for k, _ in matched.pairs()}]
        for m in matched.matches:
            assert m.fixed_index <= 8 - 3 + m.moving_index
            assert m.score <= DEFAULT_ACCEPT_THRESHOLD

    def test_fixed_correspondence_246(self):
        # the documented example uses 1-based (2, 4, 6)
        c = gen_phantom(21, PhantomConfig(size=128, correspondence=(1, 3, 5)))
        assert select_matches(c.lge, c.t1m, c.t2m).pairs() == [(1, 0), (3, 1), (5, 2)]

    def test_forced_bijection(self):
        c = gen_phantom(2, PhantomConfig(size=64, K=2, N=2))
        lge = c.lge
        t1 = Volume.from_array(lge.array(), lge.slice_positions, 1.0, Modality.T1m)
        t2 = Volume.from_array(lge.array(), lge.slice_positions, 1.0, Modality.T2m)
        assert select_matches(lge, t1, t2).pairs() == [(0, 0), (1, 1)]

    def test_noise_rejected(self):
        c = gen_phantom(0, PhantomConfig(size=64))
        res = select_matches(c.lge, noise_volume(3, 64, 1), noise_volume(3, 64, 2, Modality.T2m),
                             accept_threshold=-0.5)
        assert res.matches == [] and res.unmatched_fixed == list(range(8))
        assert len(res.rejected) == 3

    def test_scale_invariance(self, small_case, matched):
        def scaled(v, c):
            return Volume.from_array(v.array() * c, v.slice_positions, v.spacing, v.modality)

        res = select_matches(small_case.lge, scaled(small_case.t1m, 3.7), scaled(small_case.t2m, 0.4))
        assert res.pairs() == matched.pairs()

    def test_workers_do_not_change_result(self):
        c = gen_phantom(8, PhantomConfig(size=64, K=4, N=2))
        a = select_matches(c.lge, c.t1m, c.t2m, workers=1)
        b = select_matches(c.lge, c.t1m, c.t2m, workers=2)
        assert a.to_json() == b.to_json()

    def test_more_mapping_than_lge_slices(self, small_case):
        big = noise_volume(9, 128, 0)
        with pytest.raises(ValueError):
            select_matches(small_case.lge, big, big)

    def test_mismatched_mapping_counts(self, small_case):
        with pytest.raises(ValueError):
            select_matches(small_case.lge, noise_volume(3, 128, 0), noise_volume(2, 128, 1))


class TestReconstruct:
    def test_empty(self, small_case):
        r1, r2 = reconstruct_registered(MatchResult([], list(range(8)), -0.15), small_case.lge,
                                        small_case.t1m, small_case.t2m)
        assert r1.present() == [False] * 8 and r2.present() == [False] * 8

    def test_identity_bijection(self):
        r = np.random.default_rng(0)
        lge = Volume.from_array(r.random((3, 16, 16)), [0.0, 10.0, 20.0], 1.0, Modality.LGE)
        t1 = Volume.from_array(r.random((3, 16, 16)), [0.0, 10.0, 20.0], 1.0, Modality.T1m)
        t2 = Volume.from_array(r.random((3, 16, 16)), [0.0, 10.0, 20.0], 1.0, Modality.T2m)
        m = MatchResult([Match(i, i, -1.0, TransformChain()) for i in range(3)], [], -0.15)
        r1, r2 = reconstruct_registered(m, lge, t1, t2)
        np.testing.assert_array_equal(r1.array((16, 16)), t1.array())
        np.testing.assert_array_equal(r2.array((16, 16)), t2.array())
        assert r1.source_indices == [0, 1, 2]

    def test_out_of_bounds(self, small_case):
        m = MatchResult([Match(9, 0, -1.0, TransformChain())], [], -0.15)
        with pytest.raises(ValueError):
            reconstruct_registered(m, small_case.lge, small_case.t1m, small_case.t2m)

    def test_phantom_reconstruction(self, small_case, matched):
        r1, r2 = reconstruct_registered(matched, small_case.lge, small_case.t1m, small_case.t2m)
        ks = {k for k, _ in small_case.gt_correspondence}
        assert r1.present() == [k in ks for k in range(8)]
        s = small_case.lge.shape[0]
        for m in matched.matches:
            # never fabricated: the slice is exactly the warp of its source
            u = compose_chain(m.chain, s, s)
            np.testing.assert_array_equal(r1.slices[m.fixed_index].intensities,
                                          warp(small_case.t1m[m.moving_index], u).intensities)
            warped = Mask2D(warp_labels(small_case.mapping_masks[m.moving_index].labels, u.grid))
            assert dice(warped, small_case.masks[m.fixed_index], MYO) >= 90.0
