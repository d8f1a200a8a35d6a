"""Differentiable primitives: just enough to express the SSFT forward pass."""
import math

import numpy as np

from .tensor import Tensor, as_tensor, make_node

GELU_C = math.sqrt(2.0 / math.pi)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw)


def neg(a):
    return make_node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), bw)


def absolute(x):
    """|x|; the subgradient at 0 is taken as 0."""
    x = as_tensor(x)
    return make_node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def gelu(x):
    """GELU, tanh approximation."""
    x = as_tensor(x)
    u = x.data
    u2 = u * u  # u ** 3 is very slow for negative float32 bases
    t = np.tanh(GELU_C * u * (1.0 + 0.044715 * u2))
    out = 0.5 * u * (1.0 + t)

    def bw(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * u2)
        d = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t ** 2) * dinner
        return (g * d,)

    return make_node(out, (x,), bw)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape):
    src = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def sum(a, axis=None, keepdims=False):  # noqa: A001
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return make_node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    src = a.shape
    count = a.data.size if axis is None else int(np.prod([src[i] for i in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src),)

    return make_node(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_node(a.data @ b.data, (a, b), bw)


def linear(x, W, b=None):
    """y = xW + b on the trailing axis."""
    x = as_tensor(x)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} does not match weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} does not match weight {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    out = x2 @ W.data
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gW, gb

    parents = (x, W) if b is None else (x, W, b)
    return make_node(out.reshape(lead + (W.shape[1],)), parents, bw)


def conv1x1(x, W, b=None):
    """Pointwise channel mixing of an [..., H, W, Cin] map; identical to ``linear`` per pixel."""
    if x.ndim < 3:
        raise ValueError("conv1x1 expects a spatial map [..., H, W, C]")
    return linear(x, W, b)


def conv3x3(x, W, b=None):
    """3x3 cross-correlation, zero padding 1, stride 1, on [B, H, W, Cin] (or [H, W, Cin]).

    ``W`` has shape [3, 3, Cin, Cout]; output keeps H x W.
    """
    x = as_tensor(x)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if W.shape[:2] != (3, 3) or W.shape[2] != xd.shape[-1]:
        raise ValueError(f"conv3x3: kernel {W.shape} incompatible with input {x.shape}")
    B, H, Wd, _ = xd.shape
    xp = np.pad(xd, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((B, H, Wd, W.shape[3]), dtype=xd.dtype)
    for i in range(3):
        for j in range(3):
            out += xp[:, i:i + H, j:j + Wd, :] @ W.data[i, j]
    if b is not None:
        out += b.data

    def bw(g):
        g4 = g[None] if squeeze else g
        gW = np.zeros_like(W.data) if W.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gflat = g4.reshape(-1, g4.shape[-1])
        for i in range(3):
            for j in range(3):
                win = xp[:, i:i + H, j:j + Wd, :]
                if gW is not None:
                    gW[i, j] = win.reshape(-1, win.shape[-1]).T @ gflat
                if gxp is not None:
                    gxp[:, i:i + H, j:j + Wd, :] += g4 @ W.data[i, j].T
        gx = None
        if gxp is not None:
            gx = gxp[:, 1:-1, 1:-1, :]
            gx = gx[0] if squeeze else gx
        gb = gflat.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gW, gb

    parents = (x, W) if b is None else (x, W, b)
    return make_node(out[0] if squeeze else out, parents, bw)


def maxpool2d(x, k):
    """Non-overlapping k x k max pooling over the H, W axes of [B, H, W, C] (or [H, W, C]).

    Extents not divisible by ``k`` are padded by replicating the last row/column.
    Gradient goes to the first maximal element of each window (row-major order).
    """
    if k < 1:
        raise ValueError(f"maxpool2d: factor must be >= 1, got {k}")
    x = as_tensor(x)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    B, H, Wd, C = xd.shape
    Ho, Wo = -(-H // k), -(-Wd // k)
    ph, pw = Ho * k - H, Wo * k - Wd
    xp = np.pad(xd, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge") if ph or pw else xd
    win = xp.reshape(B, Ho, k, Wo, k, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, Ho, Wo, C, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        g4 = g[None] if squeeze else g
        gw = np.zeros(win.shape, dtype=g4.dtype)
        np.put_along_axis(gw, idx[..., None], g4[..., None], axis=-1)
        gp = gw.reshape(B, Ho, Wo, C, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(B, Ho * k, Wo * k, C)
        if pw:
            gp[:, :, Wd - 1, :] += gp[:, :, Wd:, :].sum(axis=2)
            gp = gp[:, :, :Wd, :]
        if ph:
            gp[:, H - 1, :, :] += gp[:, H:, :, :].sum(axis=1)
            gp = gp[:, :H, :, :]
        return (gp[0] if squeeze else gp,)

    return make_node(out[0] if squeeze else out, (x,), bw)


# ---------------------------------------------------------------- normalization

class BatchNormState:
    """Running statistics of one batchnorm layer (mutated in train mode)."""

    def __init__(self, num_features, momentum=0.1, eps=1e-5, dtype=np.float64):
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(x, gamma, beta, state, mode="train"):
    """Per-channel batch normalization of [B, H, W, D] features."""
    x = as_tensor(x)
    D = x.shape[-1]
    axes = tuple(range(x.ndim - 1))
    count = x.data.size // D
    if mode == "train":
        if count < 2:
            raise ValueError("batchnorm2d in train mode needs at least two elements per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var * count / (count - 1)
    elif mode == "eval":
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if mode == "train":
                gx = inv / count * (count * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
            else:
                gx = gxhat * inv
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), bw)


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalize over the trailing axis, then apply the affine map."""
    x = as_tensor(x)
    D = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = inv / D * (D * gxhat - gxhat.sum(axis=-1, keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- attention

def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), bw)


def multi_head_attention(q_in, kv_in, params, heads):
    """Scaled dot-product attention with ``heads`` heads.

    ``q_in`` is [N, Lq, D], ``kv_in`` is [N, Lk, D]; ``params`` maps
    ``q``, ``k``, ``v``, ``out`` to (weight, bias) pairs of D x D projections.
    Softmax runs over the Lk keys. Pass ``kv_in=q_in`` for self-attention.
    """
    N, Lq, D = q_in.shape
    Lk = kv_in.shape[1]
    if D % heads:
        raise ValueError(f"embedding dim {D} is not divisible by {heads} heads")
    if kv_in.shape[0] != N or kv_in.shape[2] != D:
        raise ValueError(f"query {q_in.shape} and key/value {kv_in.shape} shapes disagree")
    dh = D // heads

    def split(t, L):
        return transpose(reshape(t, (N, L, heads, dh)), (0, 2, 1, 3))

    q = split(linear(q_in, *params["q"]), Lq)
    k = split(linear(kv_in, *params["k"]), Lk)
    v = split(linear(kv_in, *params["v"]), Lk)
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (N, Lq, D))
    return linear(ctx, *params["out"])


# ---------------------------------------------------------------- losses

def cross_entropy(logits, targets):
    """Mean multi-class cross-entropy; ``targets`` are integer class indices."""
    logits = as_tensor(logits)
    t = np.asarray(targets)
    B, K = logits.shape
    if t.shape != (B,):
        raise ValueError(f"targets shape {t.shape} does not match batch {B}")
    if t.size and (t.min() < 0 or t.max() >= K):
        raise ValueError(f"target index out of range [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(B), t].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(B), t] -= 1.0
        return (g * p / B,)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def bce_with_logits(logits, targets):
    """Mean elementwise binary cross-entropy on raw logits (multi-hot targets)."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ValueError(f"targets shape {t.shape} does not match logits {logits.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce_with_logits targets must be 0 or 1")
    z = logits.data
    loss = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()

    def bw(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return (g * (sig - t) / z.size,)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), bw)
