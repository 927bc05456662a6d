"""Differentiable primitives built on :mod:`lidarfuse.autograd`."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import CheckError, Tensor, as_tensor, is_checked, make_result

PROB_EPS = 1e-6


def _conv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0:
        raise CheckError(f"conv2d: kernel {k} larger than padded extent {n + 2 * padding}")
    if is_checked() and span % stride != 0:
        raise CheckError(
            f"conv2d: output extent ({n} + 2*{padding} - {k})/{stride} + 1 is not an integer"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (C, H, W) -> (C*kh*kw, ho*wo)
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    c = x.shape[0]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, ho * wo)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlate a C_in×H×W map with an C_out×C_in×kH×kW kernel, zero padded."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise CheckError(f"conv2d: expected 3-D input and 4-D kernel, got {x.shape}, {weight.shape}")
    c_in, h, w = x.shape
    c_out, wc, kh, kw = weight.shape
    if wc != c_in:
        raise CheckError(f"conv2d: kernel expects {wc} input channels, input has {c_in}")
    if stride < 1 or padding < 0:
        raise CheckError("conv2d: stride must be >= 1 and padding >= 0")
    ho = _conv_out_extent(h, kh, stride, padding)
    wo = _conv_out_extent(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, ho, wo)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None]
        inputs.append(bias)

    def backward(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c_in, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return grads

    return make_result(out, inputs, backward, "conv2d")


# -- activations ------------------------------------------------------------


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data
    return make_result(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),), "silu")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0.0, xd)
    return make_result(out, (x,), lambda g: (g * _sigmoid(xd),), "softplus")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return make_result(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


_ACTIVATIONS = {"sigmoid": sigmoid, "relu": relu, "silu": silu, "softplus": softplus, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), backward, "softmax")


# -- normalization and losses --------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalize over ``axis`` (the channel axis) and apply a per-channel affine map."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    axis = axis % x.ndim
    c = x.shape[axis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise CheckError(f"layer_norm: gamma/beta must have shape ({c},)")
    bshape = [1] * x.ndim
    bshape[axis] = c
    gb = gamma.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gb + beta.data.reshape(bshape)
    other = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        gxhat = g * gb
        gx = inv * (
            gxhat
            - gxhat.mean(axis=axis, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=other), g.sum(axis=other)

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


def focal_loss(prob: Tensor, target, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean of ``-alpha * (1 - p_t)**gamma * log(p_t)`` over all elements."""
    prob = as_tensor(prob)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != prob.shape:
        raise CheckError(f"focal_loss: prob shape {prob.shape} != target shape {t.shape}")
    p = np.clip(prob.data, PROB_EPS, 1.0 - PROB_EPS)
    inside = (prob.data > PROB_EPS) & (prob.data < 1.0 - PROB_EPS)
    pt = np.where(t > 0.5, p, 1.0 - p)
    sign = np.where(t > 0.5, 1.0, -1.0)
    one_m = 1.0 - pt
    logpt = np.log(pt)
    n = max(p.size, 1)
    loss = -alpha * one_m**gamma * logpt

    def backward(g):
        # d/dpt of -(1-pt)^gamma log pt
        if gamma == 0:
            dpt = -1.0 / pt
        else:
            dpt = gamma * one_m ** (gamma - 1) * logpt - one_m**gamma / pt
        return (g * alpha * dpt * sign * inside / n,)

    return make_result(np.array(loss.sum() / n), (prob,), backward, "focal_loss")


def segment_max(values: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Row-wise max of an N×C matrix within each segment; empty segments give 0."""
    n, c = values.shape
    out = np.full((num_segments, c), -np.inf)
    np.maximum.at(out, segment_ids, values.data)
    out[np.isinf(out)] = 0.0
    # first row attaining the max per (segment, channel) receives the gradient
    hit = values.data == out[segment_ids]
    winner = np.full((num_segments, c), n, dtype=np.int64)
    rows = np.broadcast_to(np.arange(n)[:, None], (n, c))
    cols = np.broadcast_to(np.arange(c)[None, :], (n, c))
    np.minimum.at(winner, (segment_ids[:, None].repeat(c, 1)[hit], cols[hit]), rows[hit])

    def backward(g):
        gv = np.zeros((n, c))
        valid = winner < n
        seg, ch = np.nonzero(valid)
        gv[winner[seg, ch], ch] = g[seg, ch]
        return (gv,)

    return make_result(out, (values,), backward, "segment_max")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for an N×C_in input and C_out×C_in weight."""
    out = x @ weight.T
    return out + bias if bias is not None else out
