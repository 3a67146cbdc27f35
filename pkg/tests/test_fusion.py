import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slicealign.fusion import (
    OFFSET_CHANNELS,
    AttentionParams,
    ControllerParams,
    ConvParams,
    ModulationWeights,
    TaskPrompt,
    attention_weights,
    cascaded_fusion,
    conv2d,
    cross_attention,
    cross_attention_backward,
    cross_attention_forward,
    deform_conv,
    deform_conv_backward,
    deform_conv_forward,
    global_modulation,
    global_modulation_backward,
    global_modulation_forward,
    layer_norm,
    modulation_params,
    offset_generator,
    task_controller,
    task_controller_backward,
    task_controller_forward,
)

FD_TOL = 1e-4


# --- oracles -----------------------------------------------------------------

def naive_conv(x, wt, b):
    h, w, cin = x.shape
    cout = wt.shape[0]
    out = np.zeros((h, w, cout))
    for y in range(h):
        for xx in range(w):
            for o in range(cout):
                acc = b[o]
                for c in range(cin):
                    for ky in range(3):
                        for kx in range(3):
                            sy, sx = y + ky - 1, xx + kx - 1
                            if 0 <= sy < h and 0 <= sx < w:
                                acc += wt[o, c, ky, kx] * x[sy, sx, c]
                out[y, xx, o] = acc
    return out


def naive_bilinear(x, py, px):
    h, w, _ = x.shape
    y0, x0 = math.floor(py), math.floor(px)
    val = np.zeros(x.shape[2])
    for cy, cx in ((y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)):
        wgt = (1 - abs(px - cx)) * (1 - abs(py - cy))
        if 0 <= cy < h and 0 <= cx < w:
            val += wgt * x[cy, cx]
    return val


def naive_deform(x, off, wt, b):
    h, w, _ = x.shape
    out = np.zeros((h, w, wt.shape[0]))
    for y in range(h):
        for xx in range(w):
            acc = b.copy()
            for n in range(9):
                ky, kx = divmod(n, 3)
                sx = xx + kx - 1 + off[y, xx, 2 * n]
                sy = y + ky - 1 + off[y, xx, 2 * n + 1]
                acc += wt[:, :, ky, kx] @ naive_bilinear(x, sy, sx)
            out[y, xx] = acc
    return out


def gelu_scalar(v):
    return 0.5 * v * (1 + math.erf(v / math.sqrt(2)))


def naive_mlp(v, w1, b1, w2, b2):
    hid = [gelu_scalar(sum(v[i] * w1[i, k] for i in range(len(v))) + b1[k]) for k in range(w1.shape[1])]
    return np.array([sum(hid[k] * w2[k, o] for k in range(len(hid))) + b2[o] for o in range(w2.shape[1])])


def naive_modulation(f, a, p):
    h, w, c = f.shape
    pooled = np.zeros(2 * c)
    for y in range(h):
        for x in range(w):
            pooled[:c] += f[y, x]
            pooled[c:] += a[y, x]
    pooled /= h * w
    gb = naive_mlp(pooled, p.w1, p.b1, p.w2, p.b2)
    return gb[:c] * f + gb[c:]


def naive_attention(qm, kvm, p):
    c = qm.shape[2]
    xs, ys = qm.reshape(-1, c), kvm.reshape(-1, c)
    d = p.wq.shape[1]
    dh = d // p.heads
    out = np.zeros_like(xs)
    for n in range(len(xs)):
        q = xs[n] @ p.wq + p.bq
        merged = np.zeros(d)
        for hd in range(p.heads):
            sl = slice(hd * dh, (hd + 1) * dh)
            scores = [float(q[sl] @ (ys[m] @ p.wk + p.bk)[sl]) / math.sqrt(dh) for m in range(len(ys))]
            top = max(scores)
            e = [math.exp(s - top) for s in scores]
            tot = sum(e)
            for m in range(len(ys)):
                merged[sl] += e[m] / tot * (ys[m] @ p.wv + p.bv)[sl]
        out[n] = merged @ p.wo + p.bo + xs[n]
    return out.reshape(qm.shape)


def naive_controller(f, prompt, p):
    h, w, c = f.shape
    pvec = prompt.embedding @ prompt.proj + prompt.proj_bias
    out = np.zeros((h, w, p.w2.shape[1]))
    for y in range(h):
        for x in range(w):
            z = np.concatenate([f[y, x], pvec])
            mu = sum(z) / len(z)
            var = sum((zi - mu) ** 2 for zi in z) / len(z)
            zn = (z - mu) / math.sqrt(var + 1e-10) * p.ln_gain + p.ln_bias
            out[y, x] = naive_mlp(zn, p.w1, p.b1, p.w2, p.b2)
    return out


def fd_check(forward, backward, inputs, seed=0, eps=1e-6):
    """Compare backward(R) with central differences of sum(forward() * R).

    ``inputs`` maps gradient keys to arrays that ``forward`` reads live.
    Returns the worst max-norm relative error. A gradient that vanishes
    identically has no relative error; it must match to 1e-7 absolute.
    """
    out = forward()
    r = np.random.default_rng(seed).normal(size=out.shape)
    grads = backward(r)
    worst = 0.0
    for key, arr in inputs.items():
        num = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            o = flat[i]
            flat[i] = o + eps
            hi = (forward() * r).sum()
            flat[i] = o - eps
            lo = (forward() * r).sum()
            flat[i] = o
            nflat[i] = (hi - lo) / (2 * eps)
        an = np.asarray(grads[key]).reshape(num.shape)
        diff = np.abs(an - num).max()
        if np.abs(num).max() < 1e-7:
            assert diff < 1e-7, key
            continue
        worst = max(worst, diff / np.abs(num).max())
    return worst


def rand(shape, seed, scale=1.0):
    return np.random.default_rng(seed).normal(scale=scale, size=shape)


# --- offsets and deformable conv ---------------------------------------------

class TestOffsets:
    def test_zero_weights(self):
        p = ConvParams(np.zeros((OFFSET_CHANNELS, 4, 3, 3)), np.zeros(OFFSET_CHANNELS))
        assert np.all(offset_generator(rand((6, 7, 4), 0), p) == 0)

    def test_constant_input_gives_bias(self):
        b = np.arange(OFFSET_CHANNELS, dtype=float) * 0.1
        p = ConvParams(np.zeros((OFFSET_CHANNELS, 3, 3, 3)), b)
        out = offset_generator(np.full((5, 5, 3), 2.0), p)
        np.testing.assert_array_equal(out, np.broadcast_to(b, out.shape))

    def test_matches_naive_conv(self):
        x = rand((6, 5, 3), 1)
        p = ConvParams(rand((OFFSET_CHANNELS, 3, 3, 3), 2), rand(OFFSET_CHANNELS, 3))
        np.testing.assert_allclose(offset_generator(x, p), naive_conv(x, p.weight, p.bias), atol=1e-6)

    def test_wrong_width(self):
        with pytest.raises(ValueError):
            offset_generator(rand((5, 5, 3), 0), ConvParams.init(3, 7))


class TestDeformConv:
    def test_zero_offsets_equal_conv(self):
        x = rand((8, 8, 4), 3)
        p = ConvParams(rand((5, 4, 3, 3), 4), rand(5, 5))
        d = deform_conv(x, np.zeros((8, 8, OFFSET_CHANNELS)), p)
        assert np.abs(d - conv2d(x, p)).max() < 1e-6
        assert np.abs(d - naive_conv(x, p.weight, p.bias)).max() < 1e-6

    def test_unit_column_offset_is_shift(self):
        x = rand((7, 9, 3), 6)
        p = ConvParams(rand((2, 3, 3, 3), 7), rand(2, 8))
        off = np.zeros((7, 9, OFFSET_CHANNELS))
        off[..., 0::2] = 1.0
        shifted = np.zeros_like(x)
        shifted[:, :-1] = x[:, 1:]
        # column 0 differs: its left taps land on real pixels, not on the shifted padding
        np.testing.assert_allclose(deform_conv(x, off, p)[:, 1:], conv2d(shifted, p)[:, 1:], atol=1e-12)

    def test_matches_naive_sampling(self):
        x = rand((6, 7, 3), 9)
        off = np.random.default_rng(10).uniform(-2.5, 2.5, (6, 7, OFFSET_CHANNELS))
        p = ConvParams(rand((4, 3, 3, 3), 11), rand(4, 12))
        np.testing.assert_allclose(deform_conv(x, off, p), naive_deform(x, off, p.weight, p.bias), atol=1e-6)

    def test_backward_matches_fd(self):
        x = rand((8, 8, 4), 13)
        off = np.random.default_rng(14).uniform(-1.7, 1.7, (8, 8, OFFSET_CHANNELS))
        p = ConvParams(rand((4, 4, 3, 3), 15), rand(4, 16))
        ctx = {}

        def fwd():
            out, ctx["c"] = deform_conv_forward(x, off, p)
            return out

        err = fd_check(fwd, lambda g: deform_conv_backward(g, ctx["c"]),
                       {"input": x, "offsets": off, "weight": p.weight, "bias": p.bias})
        assert err < FD_TOL

    def test_zero_upstream(self):
        x = rand((5, 5, 2), 17)
        _, ctx = deform_conv_forward(x, rand((5, 5, OFFSET_CHANNELS), 18, 0.5), ConvParams.init(2, 3))
        g = deform_conv_backward(np.zeros((5, 5, 3)), ctx)
        assert all(np.all(v == 0) for v in g.values())

    def test_flat_input_has_no_offset_gradient(self):
        x = np.full((8, 8, 2), 1.5)
        off = np.random.default_rng(19).uniform(-0.4, 0.4, (8, 8, OFFSET_CHANNELS))
        _, ctx = deform_conv_forward(x, off, ConvParams(rand((3, 2, 3, 3), 20), np.zeros(3)))
        g = deform_conv_backward(rand((8, 8, 3), 21), ctx)["offsets"]
        # taps near the border straddle the zero padding, which is not flat
        assert np.abs(g[2:-2, 2:-2]).max() < 1e-12

    def test_errors(self):
        p = ConvParams.init(3, 2)
        with pytest.raises(ValueError):
            deform_conv(rand((5, 5, 3), 0), np.zeros((5, 5, 9)), p)
        with pytest.raises(ValueError):
            deform_conv(rand((5, 5, 4), 0), np.zeros((5, 5, OFFSET_CHANNELS)), p)
        with pytest.raises(ValueError):
            deform_conv(rand((5, 5, 3), 0), np.full((5, 5, OFFSET_CHANNELS), 6.0), p)


# --- modulation ----------------------------------------------------------------

class TestModulation:
    def test_identity(self):
        f = rand((5, 6, 4), 22)
        out = global_modulation(f, rand((5, 6, 4), 23), ModulationWeights.constant(4, 1.0, 0.0))
        np.testing.assert_array_equal(out, f)

    def test_zero_gamma(self):
        beta = np.array([0.5, -1.0, 2.0])
        out = global_modulation(rand((4, 4, 3), 24), rand((4, 4, 3), 25), ModulationWeights.constant(3, 0.0, beta))
        np.testing.assert_array_equal(out, np.broadcast_to(beta, out.shape))

    def test_matches_naive(self):
        f, a = rand((5, 4, 3), 26), rand((5, 4, 3), 27)
        p = ModulationWeights(rand((6, 5), 28), rand(5, 29), rand((5, 6), 30), rand(6, 31))
        np.testing.assert_allclose(global_modulation(f, a, p), naive_modulation(f, a, p), atol=1e-6)
        mp = modulation_params(f, a, p)
        assert mp.gamma.shape == (3,) and mp.beta.shape == (3,)

    def test_aligned_acts_only_through_statistics(self):
        f, a = rand((5, 5, 2), 32), rand((5, 5, 2), 33)
        p = ModulationWeights(rand((4, 6), 34), rand(6, 35), rand((6, 4), 36), rand(4, 37))
        # same channel means, different layout: no effect
        perm = a.reshape(-1, 2)[np.random.default_rng(0).permutation(25)].reshape(5, 5, 2)
        np.testing.assert_allclose(global_modulation(f, perm, p), global_modulation(f, a, p), atol=1e-12)

    def test_backward_matches_fd(self):
        f, a = rand((6, 6, 4), 38), rand((6, 6, 4), 39)
        p = ModulationWeights(rand((8, 5), 40, 0.5), rand(5, 41), rand((5, 8), 42, 0.5), rand(8, 43))
        ctx = {}

        def fwd():
            out, ctx["c"] = global_modulation_forward(f, a, p)
            return out

        err = fd_check(fwd, lambda g: global_modulation_backward(g, ctx["c"]),
                       {"f_lge": f, "f_aligned": a, "w1": p.w1, "b1": p.b1, "w2": p.w2, "b2": p.b2})
        assert err < FD_TOL

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            global_modulation(rand((4, 4, 2), 0), rand((4, 5, 2), 1), ModulationWeights.init(2))


# --- attention -----------------------------------------------------------------

def small_attn(c, seed, heads=2, hidden=8, std=0.5):
    return AttentionParams.init(c, heads=heads, hidden_dim=hidden, seed=seed, std=std)


class TestAttention:
    def test_single_kv_position(self):
        q, kv = rand((4, 5, 8), 44), rand((1, 1, 8), 45)
        p = AttentionParams.init(8, seed=1, std=0.3)
        v = kv.reshape(1, 8) @ p.wv + p.bv
        expect = (v @ p.wo + p.bo) + q
        np.testing.assert_allclose(cross_attention(q, kv, p), expect, atol=1e-12)

    def test_rows_are_distributions(self):
        a = attention_weights(rand((6, 6, 8), 46), rand((5, 7, 8), 47), AttentionParams.init(8, std=1.0))
        assert a.shape == (8, 36, 35)
        assert np.all(a >= 0)
        assert np.abs(a.sum(axis=2) - 1).max() < 1e-6

    def test_matches_naive_default_config(self):
        q, kv = rand((4, 4, 16), 48), rand((3, 5, 16), 49)
        p = AttentionParams.init(16, seed=2, std=0.2)
        assert p.heads == 8 and p.hidden_dim == 256
        np.testing.assert_allclose(cross_attention(q, kv, p), naive_attention(q, kv, p), atol=1e-5)

    def test_kv_permutation_invariance(self):
        q, kv = rand((5, 5, 8), 50), rand((6, 6, 8), 51)
        p = AttentionParams.init(8, seed=3, std=0.5)
        perm = kv.reshape(36, 8)[np.random.default_rng(1).permutation(36)].reshape(6, 6, 8)
        assert np.abs(cross_attention(q, perm, p) - cross_attention(q, kv, p)).max() < 1e-6

    def test_head_output_in_value_hull(self):
        q, kv = rand((4, 4, 4), 52), rand((4, 4, 4), 53)
        p = small_attn(4, 4)
        _, ctx = cross_attention_forward(q, kv, p)
        oh = np.einsum("hnm,hmd->hnd", ctx["attn"], ctx["vh"])
        lo, hi = ctx["vh"].min(axis=1, keepdims=True), ctx["vh"].max(axis=1, keepdims=True)
        assert np.all(oh >= lo - 1e-12) and np.all(oh <= hi + 1e-12)

    def test_backward_matches_fd(self):
        q, kv = rand((4, 4, 4), 54), rand((3, 4, 4), 55)
        p = small_attn(4, 5)
        ctx = {}

        def fwd():
            out, ctx["c"] = cross_attention_forward(q, kv, p)
            return out

        err = fd_check(fwd, lambda g: cross_attention_backward(g, ctx["c"]),
                       {"query_map": q, "kv_map": kv, **p.arrays()})
        assert err < FD_TOL

    def test_key_bias_has_no_gradient(self):
        # a shared shift of every key moves each softmax row by a constant
        q, kv = rand((3, 3, 4), 79), rand((3, 3, 4), 80)
        p = small_attn(4, 6)
        out, ctx = cross_attention_forward(q, kv, p)
        assert np.abs(cross_attention_backward(rand(out.shape, 81), ctx)["bk"]).max() < 1e-12
        moved = cross_attention(q, kv, p.replace(bk=p.bk + 3.0))
        np.testing.assert_allclose(moved, out, atol=1e-12)

    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            AttentionParams.init(8, heads=3, hidden_dim=256)

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            cross_attention(rand((3, 3, 4), 0), rand((3, 3, 5), 1), small_attn(4, 0))


class TestCascade:
    def test_zero_projection_is_identity(self):
        f = rand((4, 4, 8), 56)
        p1 = AttentionParams.init(8, seed=1)
        p2 = AttentionParams.init(8, seed=2)
        p1, p2 = (p.replace(wo=np.zeros_like(p.wo), bo=np.zeros_like(p.bo)) for p in (p1, p2))
        np.testing.assert_array_equal(cascaded_fusion(f, rand((4, 4, 8), 57), rand((4, 4, 8), 58), p1, p2), f)

    def test_order_matters(self):
        f, a, b = rand((4, 4, 8), 59), rand((4, 4, 8), 60), 3.0 * rand((4, 4, 8), 61)
        p1, p2 = AttentionParams.init(8, seed=4, std=0.5), AttentionParams.init(8, seed=5, std=0.5)
        assert np.abs(cascaded_fusion(f, a, b, p1, p2) - cascaded_fusion(f, b, a, p1, p2)).max() > 1e-3

    def test_is_composition(self):
        f, a, b = rand((4, 4, 8), 62), rand((4, 4, 8), 63), rand((4, 4, 8), 64)
        p1, p2 = AttentionParams.init(8, seed=6), AttentionParams.init(8, seed=7)
        manual = cross_attention(cross_attention(f, a, p1), b, p2)
        assert np.array_equal(cascaded_fusion(f, a, b, p1, p2), manual)


# --- controller ----------------------------------------------------------------

class TestController:
    def test_layer_norm_moments(self):
        z = rand((4, 4, 40), 65, 3.0) + 7.0
        n = layer_norm(z)
        assert np.abs(n.mean(axis=2)).max() < 1e-6
        assert np.abs(n.var(axis=2) - 1).max() < 1e-6

    def test_matches_naive(self):
        f = rand((3, 4, 6), 66)
        prompt = TaskPrompt.init(seed=1)
        p = ControllerParams.init(6, hidden=10, seed=2, std=0.2)
        np.testing.assert_allclose(task_controller(f, prompt, p), naive_controller(f, prompt, p), atol=1e-6)

    def test_prompt_changes_output(self):
        f = rand((3, 3, 6), 67)
        p = ControllerParams.init(6, seed=3, std=0.2)
        a = task_controller(f, TaskPrompt.init(seed=4), p)
        b = task_controller(f, TaskPrompt.init(seed=5), p)
        assert np.abs(a - b).max() > 1e-6

    def test_backward_matches_fd(self):
        f = rand((4, 4, 4), 68)
        prompt = TaskPrompt(rand(6, 69), rand((6, 5), 70, 0.5), rand(5, 71))
        p = ControllerParams(1 + rand(9, 72, 0.1), rand(9, 73, 0.1), rand((9, 7), 74, 0.5), rand(7, 75),
                             rand((7, 4), 76, 0.5), rand(4, 77))
        ctx = {}

        def fwd():
            out, ctx["c"] = task_controller_forward(f, prompt, p)
            return out

        err = fd_check(fwd, lambda g: task_controller_backward(g, ctx["c"]),
                       {"f_bn": f, **prompt.arrays(), **p.arrays()})
        assert err < FD_TOL

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            task_controller(rand((3, 3, 5), 0), TaskPrompt.init(), ControllerParams.init(6))


# --- contracts -------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(1, 4), st.integers(1, 3), st.integers(0, 999))
def test_shape_contract(h, w, c, heads, seed):
    x = rand((h, w, c), seed)
    off = np.clip(rand((h, w, OFFSET_CHANNELS), seed + 1, 0.5), -1.0, 1.0)
    assert offset_generator(x, ConvParams.init(c, OFFSET_CHANNELS)).shape == (h, w, OFFSET_CHANNELS)
    assert deform_conv(x, off, ConvParams.init(c, c + 1)).shape == (h, w, c + 1)
    assert global_modulation(x, x, ModulationWeights.init(c)).shape == (h, w, c)
    kv = rand((w, h, c), seed + 2)
    assert cross_attention(x, kv, AttentionParams.init(c, heads=heads, hidden_dim=2 * heads)).shape == (h, w, c)
    prompt = TaskPrompt.init(dim=8, out_dim=5)
    assert task_controller(x, prompt, ControllerParams.init(c, prompt_dim=5)).shape == (h, w, c)


def test_seeded_init_is_deterministic():
    a, b = AttentionParams.init(8, seed=9), AttentionParams.init(8, seed=9)
    assert all(np.array_equal(a.arrays()[k], b.arrays()[k]) for k in a.arrays())
    f = rand((4, 4, 8), 78)
    assert cross_attention(f, f, a).tobytes() == cross_attention(f, f, b).tobytes()
