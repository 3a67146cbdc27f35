"""Run every fusion operator on phantom-derived features and check invariants.

Features are hand-made, not learned: each slice is normalized, downsampled and
turned into a small stack of filter responses (intensity, gradients, blur,
Laplacian). Deeper "levels" are average-pooled copies passed through a fixed
seeded linear lift to a wider channel count.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter, sobel, gaussian_laplace

from . import fusion as F
from .image import Slice2D, downsample, normalize_intensity

LOW_SIZE = 32
HIGH_SIZE = 8
BN_SIZE = 4
LOW_CHANNELS = 4
HIGH_CHANNELS = 16
BN_CHANNELS = 32
TOLERANCES = {
    "zero_offset": 1e-6,
    "softmax_rows": 1e-6,
    "kv_permutation": 1e-6,
    "layernorm": 1e-6,
    "gradient": 1e-4,
    "order_sensitivity": 1e-3,
    "prompt_sensitivity": 1e-6,
}


def _low_features(img: Slice2D) -> np.ndarray:
    a = normalize_intensity(img).intensities
    while a.shape[0] > LOW_SIZE:
        a = downsample(a)
    feats = [a, sobel(a, axis=1) / 8.0, sobel(a, axis=0) / 8.0, gaussian_laplace(a, 1.0)]
    return np.stack(feats[:LOW_CHANNELS], axis=2)


def _pool(x: np.ndarray, size: int) -> np.ndarray:
    h, w, c = x.shape
    f = h // size
    return x[: size * f, : size * f].reshape(size, f, size, f, c).mean(axis=(1, 3))


def _lift(x: np.ndarray, channels: int, rng) -> np.ndarray:
    w = rng.normal(0.0, 1.0 / np.sqrt(x.shape[2]), (x.shape[2], channels))
    return np.tanh(x @ w)


def feature_stack(lge: Slice2D, t1m: Slice2D, t2m: Slice2D, seed: int = 0) -> dict:
    """Feature maps per (level, modality) for the demo."""
    out = {}
    lows = {m: _low_features(s) for m, s in (("LGE", lge), ("T1m", t1m), ("T2m", t2m))}
    high_rng = np.random.default_rng(seed + 1)
    w_high = high_rng.normal(0.0, 0.5, (LOW_CHANNELS, HIGH_CHANNELS))
    for m, f in lows.items():
        out[("low", m)] = f
        out[("high", m)] = np.tanh(_pool(gaussian_filter(f, (1, 1, 0)), HIGH_SIZE) @ w_high * 4.0)
    bn_rng = np.random.default_rng(seed + 2)
    out[("bn", "LGE")] = _lift(_pool(out[("high", "LGE")], BN_SIZE), BN_CHANNELS, bn_rng) * 3.0
    return out


def _check(value, tol, smaller=True):
    ok = bool(value < tol) if smaller else bool(value > tol)
    return {"value": float(value), "tolerance": tol, "pass": ok}


def _grad_checks(rng) -> dict:
    """FD checks on tiny random instances (at most 8x8x4)."""
    res = {}
    x = rng.normal(size=(6, 6, 3))
    off = rng.normal(scale=1.2, size=(6, 6, F.OFFSET_CHANNELS))
    p = F.ConvParams.init(3, 4, seed=int(rng.integers(1 << 30)), std=0.5)
    g_out = rng.normal(size=(6, 6, 4))
    loss = lambda: float((F.deform_conv(x, off, p) * g_out).sum())
    grads = F.deform_conv_backward(g_out, F.deform_conv_forward(x, off, p)[1])
    res["deform_conv"] = max(F.relative_error(grads[k], F.numeric_gradient(loss, v))
                             for k, v in (("input", x), ("offsets", off), ("weight", p.weight), ("bias", p.bias)))

    a = rng.normal(size=(5, 5, 3))
    mw = F.ModulationWeights.init(3, seed=int(rng.integers(1 << 30)), std=0.5)
    g_out = rng.normal(size=(5, 5, 3))
    xs = x[:5, :5].copy()
    loss = lambda: float((F.global_modulation(xs, a, mw) * g_out).sum())
    grads = F.global_modulation_backward(g_out, F.global_modulation_forward(xs, a, mw)[1])
    items = [("f_lge", xs), ("f_aligned", a)] + list(mw.arrays().items())
    res["global_modulation"] = max(F.relative_error(grads[k], F.numeric_gradient(loss, v)) for k, v in items)

    q = rng.normal(size=(3, 3, 4))
    kv = rng.normal(size=(2, 3, 4))
    ap = F.AttentionParams.init(4, heads=2, hidden_dim=8, seed=int(rng.integers(1 << 30)), std=0.5)
    g_out = rng.normal(size=q.shape)
    loss = lambda: float((F.cross_attention(q, kv, ap) * g_out).sum())
    grads = F.cross_attention_backward(g_out, F.cross_attention_forward(q, kv, ap)[1])
    # the key bias cancels inside the softmax, so its exact gradient is zero
    items = [("query_map", q), ("kv_map", kv)] + [(k, v) for k, v in ap.arrays().items() if k != "bk"]
    res["cross_attention"] = max(F.relative_error(grads[k], F.numeric_gradient(loss, v)) for k, v in items)

    fb = rng.normal(size=(3, 3, 4))
    pr = F.TaskPrompt.init(dim=6, out_dim=4, seed=int(rng.integers(1 << 30)))
    cp = F.ControllerParams.init(4, prompt_dim=4, seed=int(rng.integers(1 << 30)), std=0.5)
    cp.ln_gain[:] = rng.normal(size=cp.ln_gain.shape)
    cp.ln_bias[:] = rng.normal(size=cp.ln_bias.shape)
    g_out = rng.normal(size=fb.shape)
    loss = lambda: float((F.task_controller(fb, pr, cp) * g_out).sum())
    grads = F.task_controller_backward(g_out, F.task_controller_forward(fb, pr, cp)[1])
    items = [("f_bn", fb)] + list(pr.arrays().items()) + list(cp.arrays().items())
    res["task_controller"] = max(F.relative_error(grads[k], F.numeric_gradient(loss, v)) for k, v in items)
    return res


def invariant_report(lge: Slice2D, t1m: Slice2D, t2m: Slice2D, seed: int = 0) -> dict:
    """Run the fusion path and collect invariant checks as a JSON-ready dict."""
    feats = feature_stack(lge, t1m, t2m, seed)
    f_lge = feats[("low", "LGE")]
    c = f_lge.shape[2]
    checks = {}

    # low level: offsets from LGE, deformable alignment and modulation per modality
    off_p = F.ConvParams.init(c, F.OFFSET_CHANNELS, seed=seed + 10)
    dcn_p = F.ConvParams.init(c, c, seed=seed + 11, std=0.2)
    mod_w = F.ModulationWeights.init(c, seed=seed + 12)
    offsets = F.offset_generator(f_lge, off_p)
    low_out = []
    for m in ("T1m", "T2m"):
        aligned = F.deform_conv(feats[("low", m)], offsets, dcn_p)
        low_out.append(F.global_modulation(f_lge, aligned, mod_w))
    low_fused = 0.5 * (low_out[0] + low_out[1])
    zero = F.deform_conv(feats[("low", "T1m")], np.zeros_like(offsets), dcn_p)
    checks["zero_offset_equals_conv"] = _check(
        np.abs(zero - F.conv2d(feats[("low", "T1m")], dcn_p)).max(), TOLERANCES["zero_offset"])

    # high level: cascaded cross-attention
    hc = feats[("high", "LGE")].shape[2]
    a1 = F.AttentionParams.init(hc, seed=seed + 20, std=0.1)
    a2 = F.AttentionParams.init(hc, seed=seed + 21, std=0.1)
    hl, h1, h2 = feats[("high", "LGE")], feats[("high", "T1m")], feats[("high", "T2m")]
    high_fused = F.cascaded_fusion(hl, h1, h2, a1, a2)
    attn = F.attention_weights(hl, h1, a1)
    checks["softmax_rows_sum_to_one"] = _check(np.abs(attn.sum(axis=2) - 1.0).max(), TOLERANCES["softmax_rows"])
    perm = np.random.default_rng(seed + 22).permutation(h1.shape[0] * h1.shape[1])
    h1p = h1.reshape(-1, hc)[perm].reshape(h1.shape)
    checks["kv_permutation_invariance"] = _check(
        np.abs(F.cross_attention(hl, h1p, a1) - F.cross_attention(hl, h1, a1)).max(), TOLERANCES["kv_permutation"])
    swapped = F.cascaded_fusion(hl, h2, h1, a1, a2)
    checks["cascade_order_sensitivity"] = _check(
        np.abs(swapped - high_fused).max(), TOLERANCES["order_sensitivity"], smaller=False)

    # bottleneck: task controller with two prompts
    bn = feats[("bn", "LGE")]
    ctl = F.ControllerParams.init(bn.shape[2], seed=seed + 30, std=0.1)
    p_a = F.TaskPrompt.init(seed=seed + 31)
    p_b = F.TaskPrompt.init(seed=seed + 32)
    out_a, ctx = F.task_controller_forward(bn, p_a, ctl)
    out_b = F.task_controller(bn, p_b, ctl)
    zhat = ctx["zhat"]
    checks["layernorm_moments"] = _check(
        max(np.abs(zhat.mean(axis=2)).max(), np.abs(zhat.var(axis=2) - 1.0).max()), TOLERANCES["layernorm"])
    checks["prompt_sensitivity"] = _check(
        np.abs(out_a - out_b).max(), TOLERANCES["prompt_sensitivity"], smaller=False)

    for name, err in _grad_checks(np.random.default_rng(seed + 40)).items():
        checks[f"gradient_{name}"] = _check(err, TOLERANCES["gradient"])

    shapes = {
        "low": list(low_fused.shape),
        "high": list(high_fused.shape),
        "bottleneck": list(out_a.shape),
    }
    shape_ok = (low_fused.shape == f_lge.shape and high_fused.shape == hl.shape and out_a.shape == bn.shape)
    checks["shape_contract"] = {"value": shapes, "pass": bool(shape_ok)}
    return {
        "seed": seed,
        "checks": checks,
        "all_pass": all(v["pass"] for v in checks.values()),
        "output_norms": {
            "low": float(np.linalg.norm(low_fused)),
            "high": float(np.linalg.norm(high_fused)),
            "bottleneck": float(np.linalg.norm(out_a)),
        },
    }
