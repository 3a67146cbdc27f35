"""Feature-fusion operators with hand-written backward passes.

Feature maps are float64 arrays shaped (H, W, C). Each operator has a
``*_forward`` returning ``(output, ctx)`` and a ``*_backward(grad, ctx)``
returning a dict of gradients keyed like the forward inputs. Weights come from
seeded Gaussian initializers (std 0.02 by default); nothing here trains.

Operators:

* ``offset_generator``: 3x3 convolution producing per-tap (dx, dy) offsets.
* ``deform_conv``: 3x3 deformable convolution with bilinear taps; pixels
  outside the map read as zero.
* ``global_modulation``: average-pool the channel concat of two maps, run a
  two-layer MLP to per-channel (gamma, beta), return ``gamma * f_lge + beta``.
* ``cross_attention``: multi-head scaled dot-product attention with queries
  from one map and keys/values from another, output projection and a residual.
* ``task_controller``: concat a broadcast prompt, layer-normalize per
  position, two-layer MLP back to the input width.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import erf

KERNEL = 3
TAPS = KERNEL * KERNEL
OFFSET_CHANNELS = 2 * TAPS
DEFAULT_HEADS = 8
DEFAULT_HIDDEN = 256
PROMPT_DIM = 128
LN_EPS = 1e-10

# (ky, kx) tap displacements in row-major order
_TAP_DY = np.repeat(np.arange(KERNEL) - 1, KERNEL)
_TAP_DX = np.tile(np.arange(KERNEL) - 1, KERNEL)


def _check_map(x, name="feature map"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"{name} must be HxWxC, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} must be finite")
    return x


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


class _Params:
    """Dataclass mixin: name/array iteration for gradient checks."""

    def arrays(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if isinstance(getattr(self, f.name), np.ndarray)}

    def replace(self, **kw):
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return type(self)(**vals)


# --- convolution -------------------------------------------------------------

@dataclass
class ConvParams(_Params):
    weight: np.ndarray  # (C_out, C_in, 3, 3)
    bias: np.ndarray  # (C_out,)

    @classmethod
    def init(cls, c_in, c_out, seed=0, std=0.02):
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, std, (c_out, c_in, KERNEL, KERNEL)), np.zeros(c_out))


def _check_conv(x, p: ConvParams):
    if p.weight.ndim != 4 or p.weight.shape[2:] != (KERNEL, KERNEL):
        raise ValueError(f"conv weight must be (C_out, C_in, 3, 3), got {p.weight.shape}")
    if p.weight.shape[1] != x.shape[2]:
        raise ValueError(f"conv expects {p.weight.shape[1]} input channels, got {x.shape[2]}")
    if p.bias.shape != (p.weight.shape[0],):
        raise ValueError("bias length must equal C_out")


def conv2d(x, p: ConvParams) -> np.ndarray:
    """Plain 3x3 convolution (cross-correlation), stride 1, zero padding 1."""
    x = _check_map(x)
    _check_conv(x, p)
    h, w, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    cols = np.stack([xp[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dy, dx in zip(_TAP_DY, _TAP_DX)], axis=2)
    wr = p.weight.reshape(p.weight.shape[0], p.weight.shape[1], TAPS).transpose(0, 2, 1)
    return np.einsum("hwnc,onc->hwo", cols, wr) + p.bias


def offset_generator(f_lge, p: ConvParams) -> np.ndarray:
    """Offset field (H, W, 18) from the LGE feature map: (dx, dy) per tap."""
    if p.weight.shape[0] != OFFSET_CHANNELS:
        raise ValueError(f"offset generator needs {OFFSET_CHANNELS} output channels")
    return conv2d(f_lge, p)


# --- deformable convolution --------------------------------------------------

def _corners(x, px, py):
    """Bilinear corner indices, weights and validity for sample points px, py (any shape)."""
    h, w = x.shape[:2]
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0
    out = []
    for cy, cx, wgt in (
        (y0, x0, (1 - fx) * (1 - fy)),
        (y0, x0 + 1, fx * (1 - fy)),
        (y0 + 1, x0, (1 - fx) * fy),
        (y0 + 1, x0 + 1, fx * fy),
    ):
        valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        out.append((np.clip(cy, 0, h - 1), np.clip(cx, 0, w - 1), wgt, valid))
    return out, fx, fy


def _gather(x, cy, cx, valid):
    v = x[cy, cx]  # (..., C)
    return np.where(valid[..., None], v, 0.0)


def deform_conv_forward(x, offsets, p: ConvParams):
    """Deformable 3x3 convolution. Returns ``(out, ctx)``."""
    x = _check_map(x, "input")
    offsets = _check_map(offsets, "offsets")
    _check_conv(x, p)
    h, w, _ = x.shape
    if offsets.shape != (h, w, OFFSET_CHANNELS):
        raise ValueError(f"offsets must be ({h}, {w}, {OFFSET_CHANNELS}), got {offsets.shape}")
    if np.abs(offsets).max(initial=0.0) > max(h, w):
        raise ValueError("offset magnitude exceeds the feature map size")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    px = xx[..., None] + _TAP_DX + offsets[..., 0::2]  # (H, W, 9)
    py = yy[..., None] + _TAP_DY + offsets[..., 1::2]
    corners, fx, fy = _corners(x, px, py)
    vals = [_gather(x, cy, cx, valid) for cy, cx, _, valid in corners]  # each (H, W, 9, C)
    cols = sum(c[2][..., None] * v for c, v in zip(corners, vals))
    wr = p.weight.reshape(p.weight.shape[0], p.weight.shape[1], TAPS).transpose(0, 2, 1)
    out = np.einsum("hwnc,onc->hwo", cols, wr) + p.bias
    ctx = dict(x=x, p=p, corners=corners, vals=vals, fx=fx, fy=fy, cols=cols, wr=wr)
    return out, ctx


def deform_conv(x, offsets, p: ConvParams) -> np.ndarray:
    return deform_conv_forward(x, offsets, p)[0]


def deform_conv_backward(grad, ctx) -> dict:
    """Gradients with respect to ``input``, ``offsets``, ``weight`` and ``bias``."""
    x, p, corners, vals = ctx["x"], ctx["p"], ctx["corners"], ctx["vals"]
    fx, fy, cols, wr = ctx["fx"], ctx["fy"], ctx["cols"], ctx["wr"]
    grad = np.asarray(grad, dtype=np.float64)
    d_wr = np.einsum("hwo,hwnc->onc", grad, cols)
    d_weight = d_wr.transpose(0, 2, 1).reshape(p.weight.shape)
    d_bias = grad.sum(axis=(0, 1))
    d_cols = np.einsum("hwo,onc->hwnc", grad, wr)

    d_x = np.zeros_like(x)
    for cy, cx, wgt, valid in corners:
        contrib = d_cols * (wgt * valid)[..., None]
        np.add.at(d_x, (cy, cx), contrib)

    v00, v01, v10, v11 = vals
    ds_dx = (1 - fy)[..., None] * (v01 - v00) + fy[..., None] * (v11 - v10)
    ds_dy = (1 - fx)[..., None] * (v10 - v00) + fx[..., None] * (v11 - v01)
    d_off = np.empty(x.shape[:2] + (OFFSET_CHANNELS,))
    d_off[..., 0::2] = (d_cols * ds_dx).sum(axis=3)
    d_off[..., 1::2] = (d_cols * ds_dy).sum(axis=3)
    return {"input": d_x, "offsets": d_off, "weight": d_weight, "bias": d_bias}


# --- global modulation -------------------------------------------------------

@dataclass(frozen=True)
class ModulationParams:
    """Per-channel scale and shift produced by the modulation MLP."""

    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ValueError("gamma and beta must be equal-length vectors")
        if not (np.all(np.isfinite(self.gamma)) and np.all(np.isfinite(self.beta))):
            raise ValueError("gamma and beta must be finite")


@dataclass
class ModulationWeights(_Params):
    w1: np.ndarray  # (2C, hidden)
    b1: np.ndarray
    w2: np.ndarray  # (hidden, 2C) -> [gamma | beta]
    b2: np.ndarray

    @classmethod
    def init(cls, channels, hidden=None, seed=0, std=0.02):
        rng = np.random.default_rng(seed)
        hidden = hidden or 2 * channels
        return cls(
            rng.normal(0.0, std, (2 * channels, hidden)),
            np.zeros(hidden),
            rng.normal(0.0, std, (hidden, 2 * channels)),
            np.concatenate([np.ones(channels), np.zeros(channels)]),
        )

    @classmethod
    def constant(cls, channels, gamma, beta, hidden=4):
        """Weights that output fixed (gamma, beta) whatever the input."""
        g = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (channels,))
        b = np.broadcast_to(np.asarray(beta, dtype=np.float64), (channels,))
        return cls(np.zeros((2 * channels, hidden)), np.zeros(hidden),
                   np.zeros((hidden, 2 * channels)), np.concatenate([g, b]))


def global_modulation_forward(f_lge, f_aligned, p: ModulationWeights):
    f_lge = _check_map(f_lge, "f_lge")
    f_aligned = _check_map(f_aligned, "f_aligned")
    if f_lge.shape != f_aligned.shape:
        raise ValueError(f"shape mismatch: {f_lge.shape} vs {f_aligned.shape}")
    c = f_lge.shape[2]
    if p.w1.shape[0] != 2 * c or p.w2.shape[1] != 2 * c:
        raise ValueError("modulation weights do not match 2C input/output width")
    pooled = np.concatenate([f_lge.mean(axis=(0, 1)), f_aligned.mean(axis=(0, 1))])
    pre = pooled @ p.w1 + p.b1
    hid = gelu(pre)
    gb = hid @ p.w2 + p.b2
    gamma, beta = gb[:c], gb[c:]
    out = gamma * f_lge + beta
    ctx = dict(f_lge=f_lge, f_aligned=f_aligned, p=p, pooled=pooled, pre=pre, hid=hid, gamma=gamma)
    return out, ctx


def global_modulation(f_lge, f_aligned, p: ModulationWeights) -> np.ndarray:
    return global_modulation_forward(f_lge, f_aligned, p)[0]


def modulation_params(f_lge, f_aligned, p: ModulationWeights) -> ModulationParams:
    ctx = global_modulation_forward(f_lge, f_aligned, p)[1]
    c = ctx["gamma"].shape[0]
    gb = ctx["hid"] @ p.w2 + p.b2
    return ModulationParams(gb[:c].copy(), gb[c:].copy())


def global_modulation_backward(grad, ctx) -> dict:
    f_lge, p, gamma = ctx["f_lge"], ctx["p"], ctx["gamma"]
    h, w, c = f_lge.shape
    grad = np.asarray(grad, dtype=np.float64)
    d_gamma = (grad * f_lge).sum(axis=(0, 1))
    d_beta = grad.sum(axis=(0, 1))
    d_gb = np.concatenate([d_gamma, d_beta])
    d_w2 = np.outer(ctx["hid"], d_gb)
    d_hid = p.w2 @ d_gb
    d_pre = d_hid * gelu_grad(ctx["pre"])
    d_w1 = np.outer(ctx["pooled"], d_pre)
    d_pooled = p.w1 @ d_pre
    n = h * w
    d_lge = grad * gamma + d_pooled[:c] / n
    d_aligned = np.broadcast_to(d_pooled[c:] / n, f_lge.shape).copy()
    return {"f_lge": d_lge, "f_aligned": d_aligned, "w1": d_w1, "b1": d_pre, "w2": d_w2, "b2": d_gb}


# --- cross attention ---------------------------------------------------------

@dataclass
class AttentionParams(_Params):
    wq: np.ndarray  # (C, D)
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray  # (D, C)
    bo: np.ndarray
    heads: int = DEFAULT_HEADS

    def __post_init__(self):
        d = self.wq.shape[1]
        if d % self.heads:
            raise ValueError(f"hidden_dim {d} is not divisible by heads {self.heads}")

    @property
    def hidden_dim(self) -> int:
        return self.wq.shape[1]

    @classmethod
    def init(cls, channels, heads=DEFAULT_HEADS, hidden_dim=DEFAULT_HIDDEN, seed=0, std=0.02):
        if hidden_dim % heads:
            raise ValueError(f"hidden_dim {hidden_dim} is not divisible by heads {heads}")
        rng = np.random.default_rng(seed)
        mats = [rng.normal(0.0, std, (channels, hidden_dim)) for _ in range(3)]
        wo = rng.normal(0.0, std, (hidden_dim, channels))
        z = np.zeros
        return cls(mats[0], z(hidden_dim), mats[1], z(hidden_dim), mats[2], z(hidden_dim),
                   wo, z(channels), heads)


def _split(a, heads):
    n, d = a.shape
    return a.reshape(n, heads, d // heads).transpose(1, 0, 2)  # (heads, n, dh)


def _merge(a):
    heads, n, dh = a.shape
    return a.transpose(1, 0, 2).reshape(n, heads * dh)


def cross_attention_forward(query_map, kv_map, p: AttentionParams):
    q_in = _check_map(query_map, "query_map")
    kv_in = _check_map(kv_map, "kv_map")
    if q_in.shape[2] != kv_in.shape[2]:
        raise ValueError("query and key/value maps must have equal channel widths")
    if p.wq.shape[0] != q_in.shape[2] or p.wo.shape[1] != q_in.shape[2]:
        raise ValueError("attention projections do not match the channel width")
    hq, wq_, c = q_in.shape
    x = q_in.reshape(-1, c)
    y = kv_in.reshape(-1, c)
    q = x @ p.wq + p.bq
    k = y @ p.wk + p.bk
    v = y @ p.wv + p.bv
    qh, kh, vh = _split(q, p.heads), _split(k, p.heads), _split(v, p.heads)
    scale = 1.0 / math.sqrt(qh.shape[2])
    logits = np.einsum("hnd,hmd->hnm", qh, kh) * scale
    logits -= logits.max(axis=2, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=2, keepdims=True)
    oh = np.einsum("hnm,hmd->hnd", attn, vh)
    o = _merge(oh)
    out = o @ p.wo + p.bo + x
    ctx = dict(x=x, y=y, qh=qh, kh=kh, vh=vh, attn=attn, o=o, p=p, scale=scale,
               q_shape=q_in.shape, kv_shape=kv_in.shape)
    return out.reshape(hq, wq_, c), ctx


def cross_attention(query_map, kv_map, p: AttentionParams) -> np.ndarray:
    return cross_attention_forward(query_map, kv_map, p)[0]


def cross_attention_backward(grad, ctx) -> dict:
    p, x, y, attn = ctx["p"], ctx["x"], ctx["y"], ctx["attn"]
    qh, kh, vh, o, scale = ctx["qh"], ctx["kh"], ctx["vh"], ctx["o"], ctx["scale"]
    g = np.asarray(grad, dtype=np.float64).reshape(x.shape)
    d_wo = o.T @ g
    d_bo = g.sum(axis=0)
    d_oh = _split(g @ p.wo.T, p.heads)
    d_attn = np.einsum("hnd,hmd->hnm", d_oh, vh)
    d_vh = np.einsum("hnm,hnd->hmd", attn, d_oh)
    d_logits = attn * (d_attn - (d_attn * attn).sum(axis=2, keepdims=True))
    d_qh = np.einsum("hnm,hmd->hnd", d_logits, kh) * scale
    d_kh = np.einsum("hnm,hnd->hmd", d_logits, qh) * scale
    d_q, d_k, d_v = _merge(d_qh), _merge(d_kh), _merge(d_vh)
    d_x = g + d_q @ p.wq.T
    d_y = d_k @ p.wk.T + d_v @ p.wv.T
    return {
        "query_map": d_x.reshape(ctx["q_shape"]),
        "kv_map": d_y.reshape(ctx["kv_shape"]),
        "wq": x.T @ d_q, "bq": d_q.sum(axis=0),
        "wk": y.T @ d_k, "bk": d_k.sum(axis=0),
        "wv": y.T @ d_v, "bv": d_v.sum(axis=0),
        "wo": d_wo, "bo": d_bo,
    }


def attention_weights(query_map, kv_map, p: AttentionParams) -> np.ndarray:
    """Softmax weights (heads, n_query, n_kv) of one attention block."""
    return cross_attention_forward(query_map, kv_map, p)[1]["attn"]


def cascaded_fusion(f_lge, f_t1m, f_t2m, p_first: AttentionParams, p_second: AttentionParams) -> np.ndarray:
    """LGE queries attend to T1m, and that result then attends to T2m."""
    f1 = cross_attention(f_lge, f_t1m, p_first)
    return cross_attention(f1, f_t2m, p_second)


# --- task-aware controller ---------------------------------------------------

@dataclass
class TaskPrompt(_Params):
    embedding: np.ndarray  # (128,)
    proj: np.ndarray  # (128, P)
    proj_bias: np.ndarray  # (P,)

    @classmethod
    def init(cls, dim=PROMPT_DIM, out_dim=PROMPT_DIM, seed=0, std=0.02):
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, 1.0, dim), rng.normal(0.0, std, (dim, out_dim)) + np.eye(dim, out_dim),
                   np.zeros(out_dim))


@dataclass
class ControllerParams(_Params):
    ln_gain: np.ndarray  # (C + P,)
    ln_bias: np.ndarray
    w1: np.ndarray  # (C + P, hidden)
    b1: np.ndarray
    w2: np.ndarray  # (hidden, C)
    b2: np.ndarray

    @classmethod
    def init(cls, channels, prompt_dim=PROMPT_DIM, hidden=None, seed=0, std=0.02):
        rng = np.random.default_rng(seed)
        width = channels + prompt_dim
        hidden = hidden or width
        return cls(np.ones(width), np.zeros(width),
                   rng.normal(0.0, std, (width, hidden)), np.zeros(hidden),
                   rng.normal(0.0, std, (hidden, channels)), np.zeros(channels))


def layer_norm(z, eps=LN_EPS):
    mu = z.mean(axis=-1, keepdims=True)
    var = z.var(axis=-1, keepdims=True)
    return (z - mu) / np.sqrt(var + eps)


def task_controller_forward(f_bn, prompt: TaskPrompt, p: ControllerParams):
    f_bn = _check_map(f_bn, "f_bn")
    h, w, c = f_bn.shape
    pvec = prompt.embedding @ prompt.proj + prompt.proj_bias
    if p.ln_gain.shape[0] != c + pvec.shape[0] or p.w2.shape[1] != c:
        raise ValueError("controller weights do not match feature plus prompt width")
    z = np.concatenate([f_bn, np.broadcast_to(pvec, (h, w, pvec.shape[0]))], axis=2)
    mu = z.mean(axis=2, keepdims=True)
    var = z.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    zhat = (z - mu) * inv
    normed = zhat * p.ln_gain + p.ln_bias
    pre = normed @ p.w1 + p.b1
    hid = gelu(pre)
    out = hid @ p.w2 + p.b2
    ctx = dict(f_bn=f_bn, prompt=prompt, p=p, zhat=zhat, inv=inv, normed=normed, pre=pre, hid=hid)
    return out, ctx


def task_controller(f_bn, prompt: TaskPrompt, p: ControllerParams) -> np.ndarray:
    return task_controller_forward(f_bn, prompt, p)[0]


def task_controller_backward(grad, ctx) -> dict:
    p, prompt, zhat, inv = ctx["p"], ctx["prompt"], ctx["zhat"], ctx["inv"]
    c = ctx["f_bn"].shape[2]
    g = np.asarray(grad, dtype=np.float64)
    d_w2 = np.einsum("hwk,hwc->kc", ctx["hid"], g)
    d_b2 = g.sum(axis=(0, 1))
    d_pre = (g @ p.w2.T) * gelu_grad(ctx["pre"])
    d_w1 = np.einsum("hwi,hwk->ik", ctx["normed"], d_pre)
    d_b1 = d_pre.sum(axis=(0, 1))
    d_normed = d_pre @ p.w1.T
    d_gain = (d_normed * zhat).sum(axis=(0, 1))
    d_lnb = d_normed.sum(axis=(0, 1))
    d_zhat = d_normed * p.ln_gain
    d_z = inv * (d_zhat - d_zhat.mean(axis=2, keepdims=True)
                 - zhat * (d_zhat * zhat).mean(axis=2, keepdims=True))
    d_pvec = d_z[..., c:].sum(axis=(0, 1))
    return {
        "f_bn": d_z[..., :c],
        "embedding": prompt.proj @ d_pvec,
        "proj": np.outer(prompt.embedding, d_pvec),
        "proj_bias": d_pvec,
        "ln_gain": d_gain, "ln_bias": d_lnb,
        "w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2,
    }


AttentionConfig = AttentionParams


# --- gradient checking -------------------------------------------------------

def numeric_gradient(fn, arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Max-norm relative error; ``floor`` keeps vanishing gradients from dividing by ~0."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return float(np.abs(analytic - numeric).max(initial=0.0) / max(np.abs(numeric).max(initial=0.0), floor))
