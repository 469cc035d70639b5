"""Differentiable neural-network ops built on :mod:`sarmae.tensor_core.tensor`."""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import ShapeError, Tensor, as_tensor, make_result


# -- normalisation / attention ---------------------------------------------------

def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(x.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward)


# -- activations -------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), backward)


_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    out = (x.data * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype),)

    return make_result(out, (x,), backward)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    neg = alpha * np.expm1(np.minimum(x.data, 0))
    out = np.where(x.data > 0, x.data, neg).astype(x.dtype)

    def backward(g):
        return (g * np.where(x.data > 0, 1.0, neg + alpha).astype(x.dtype),)

    return make_result(out, (x,), backward)


# -- convolution / resampling ---------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, (out, in, kh, kw) weight.

    Evaluated as a sum of ``kh * kw`` shifted matrix products, which keeps
    memory at one activation-sized buffer instead of a full im2col matrix.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d x and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {cw}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xp_nhwc = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    wt = weight.data
    # (kh, kw, c, o), contiguous: strided weight slices fall off the BLAS path
    taps = np.ascontiguousarray(wt.transpose(2, 3, 1, 0))

    def window(i, j):
        # contiguous (n*oh*ow, c) copy so each tap is a single 2-D BLAS call
        return np.ascontiguousarray(xp_nhwc[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]).reshape(-1, c)

    out = np.zeros((n * oh * ow, o), dtype=np.result_type(x.dtype, weight.dtype))
    for i in range(kh):
        for j in range(kw):
            out += window(i, j) @ taps[i, j]
    if bias is not None:
        out += bias.data
    result = np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g_nhwc = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        g_flat = g_nhwc.reshape(-1, o)
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp_nhwc)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += (g_flat @ taps[i, j].T).reshape(n, oh, ow, c)
            gx = gxp.transpose(0, 3, 1, 2)
            if padding:
                gx = gx[:, :, padding : padding + h, padding : padding + w]
            gx = np.ascontiguousarray(gx)
        gw = None
        if weight.requires_grad:
            gtaps = np.empty_like(taps)
            for i in range(kh):
                for j in range(kw):
                    gtaps[i, j] = window(i, j).T @ g_flat
            gw = np.ascontiguousarray(gtaps.transpose(3, 2, 0, 1))
        if bias is None:
            return gx, gw
        return gx, gw, g_flat.sum(axis=0)

    return make_result(result, parents, backward)


def bilinear_matrix(n_in: int, scale: int = 2) -> np.ndarray:
    """Row-stochastic (scale*n_in, n_in) matrix for half-pixel bilinear resampling.

    Output sample ``o`` reads source coordinate ``(o + 0.5) / scale - 0.5``;
    coordinates outside ``[0, n_in - 1]`` clamp to the edge (align_corners=False).
    """
    n_out = n_in * scale
    src = (np.arange(n_out) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling of the two trailing (H, W) axes."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2x expects NCHW, got {x.shape}")
    _, _, h, w = x.shape
    uh = bilinear_matrix(h).astype(x.dtype)
    uw = bilinear_matrix(w).astype(x.dtype)
    out = uh @ x.data @ uw.T

    def backward(g):
        return (uh.T @ g @ uw,)

    return make_result(out, (x,), backward)


# -- losses -----------------------------------------------------------------------

def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean(), dtype=pred.dtype)
    scale = 2.0 / diff.size

    def backward(g):
        gd = (g * scale * diff).astype(pred.dtype)
        return gd, -gd

    return make_result(out, (pred, target), backward)


def rmse(pred: Tensor, target) -> Tensor:
    return mse(pred, target).sqrt()


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; class axis is 1 for (n, K, ...) logits."""
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if labels.dtype.kind not in "iu":
        raise TypeError("cross_entropy labels must be integers")
    if logits.ndim < 2:
        raise ShapeError(f"cross_entropy expects (n, K, ...) logits, got {logits.shape}")
    k = logits.shape[1]
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k}): min {labels.min()}, max {labels.max()}")

    moved = np.moveaxis(logits.data, 1, -1).reshape(-1, k)
    flat = labels.reshape(-1)
    shifted = moved - moved.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(flat.size)
    out = np.asarray(-logp[rows, flat].mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[rows, flat] -= 1.0
        p *= g / flat.size
        shape = (logits.shape[0],) + logits.shape[2:] + (k,)
        return (np.moveaxis(p.reshape(shape), -1, 1).astype(logits.dtype),)

    return make_result(out, (logits,), backward)
