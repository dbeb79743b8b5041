"""Differentiable building blocks on channels-last (NHWC) tensors.

Spatial ops accept any number of leading batch axes: ``(..., H, W, C)``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import (
    Tensor,
    add,
    amax,
    as_tensor,
    broadcast_to,
    concat,
    make_result,
    matmul,
    mean,
    reshape,
)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, H, W, Cin) -> (B*H*W, Cin*k*k) patches with zero 'same' padding."""
    b, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (B, H, W, Cin, k, k)
    return win.reshape(b * h * w, c * k * k)


def _conv_same(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Raw 'same' convolution of (B, H, W, Cin) with (k, k, Cin, Cout)."""
    k, _, cin, cout = w.shape
    b, h, wd, _ = x.shape
    cols = _im2col(x, k)
    wmat = w.transpose(2, 0, 1, 3).reshape(cin * k * k, cout)
    return (cols @ wmat).reshape(b, h, wd, cout), cols


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 convolution with zero padding that keeps H and W.

    ``kernels`` has shape (k, k, C_in, C_out) with k odd; ``bias`` is (C_out,).
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise ShapeError(f"kernels must be (k, k, C_in, C_out), got {kernels.shape}")
    k, _, cin, cout = kernels.shape
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if x.ndim < 3 or x.shape[-1] != cin:
        raise ShapeError(f"input {x.shape} does not have C_in={cin} channels last")
    lead = x.shape[:-3]
    h, w = x.shape[-3], x.shape[-2]
    xb = x.data.reshape(-1, h, w, cin)
    out, cols = _conv_same(xb, kernels.data)
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"bias must be ({cout},), got {bias.shape}")
        out = out + bias.data
    out = out.reshape(*lead, h, w, cout)

    def bw(g):
        g4 = g.reshape(-1, h, w, cout)
        gx = gk = gb = None
        if x.requires_grad:
            flipped = kernels.data[::-1, ::-1].transpose(0, 1, 3, 2)
            gx = _conv_same(g4, np.ascontiguousarray(flipped))[0].reshape(x.shape)
        if kernels.requires_grad:
            gk = (cols.T @ g4.reshape(-1, cout)).reshape(cin, k, k, cout).transpose(1, 2, 0, 3)
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(0, 1, 2))
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return make_result(out, parents, bw, "conv2d")


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over (..., H, W, C)."""
    h, w, c = x.shape[-3:]
    if h % 2 or w % 2:
        raise ShapeError(f"spatial extent {h}x{w} is not divisible by 2")
    lead = x.shape[:-3]
    xr = x.data.reshape(-1, h // 2, 2, w // 2, 2, c)
    out_k = xr.max(axis=(2, 4), keepdims=True)
    out = out_k.reshape(*lead, h // 2, w // 2, c)

    def bw(g):
        mask = xr == out_k
        share = mask / mask.sum(axis=(2, 4), keepdims=True)
        gk = g.reshape(-1, h // 2, 1, w // 2, 1, c)
        return ((share * gk).reshape(x.shape),)

    return make_result(out, (x,), bw, "max_pool2x2")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over every axis but the last.

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the running buffers are used as-is.
    """
    c = x.shape[-1]
    xf = x.data.reshape(-1, c)
    n = xf.shape[0]
    if training:
        mu = xf.mean(axis=0)
        centred = xf - mu
        var = np.einsum("ij,ij->j", centred, centred) / n
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * n / max(n - 1, 1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centred if training else xf - mu) * inv_std
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def bw(g):
        gf = g.reshape(-1, c)
        dgamma = np.einsum("ij,ij->j", gf, xhat)
        dbeta = gf.sum(axis=0)
        if training:
            dx = (gamma.data * inv_std / n) * (n * gf - dbeta - xhat * dgamma)
        else:
            dx = gf * gamma.data * inv_std
        return dx.reshape(x.shape), dgamma, dbeta

    return make_result(out, (x, gamma, beta), bw, "batch_norm")


def global_pool(x: Tensor, mode: str = "avg") -> Tensor:
    """Pool every spatial position: (..., H, W, C) -> (..., 1, 1, C)."""
    if x.ndim < 3:
        raise ShapeError(f"global_pool needs (..., H, W, C), got {x.shape}")
    if mode == "avg":
        return mean(x, axis=(-3, -2), keepdims=True)
    if mode == "max":
        return amax(x, axis=(-3, -2), keepdims=True)
    raise ValueError(f"unknown pooling mode {mode!r}")


def channel_pool(x: Tensor, mode: str = "avg") -> Tensor:
    """Pool across channels at each position: (..., H, W, C) -> (..., H, W, 1)."""
    if x.ndim < 3:
        raise ShapeError(f"channel_pool needs (..., H, W, C), got {x.shape}")
    if mode == "avg":
        return mean(x, axis=-1, keepdims=True)
    if mode == "max":
        return amax(x, axis=-1, keepdims=True)
    raise ValueError(f"unknown pooling mode {mode!r}")


def linear(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map on the last axis: ``x @ weights + bias``."""
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"cannot map {x.shape} through weights {weights.shape}")
    out = matmul(x, weights)
    if bias is not None:
        if bias.shape != (weights.shape[1],):
            raise ShapeError(f"bias {bias.shape} does not match output width {weights.shape[1]}")
        out = add(out, bias)
    return out


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (logits,), bw, "softmax")


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        s = np.exp(out)
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (logits,), bw, "log_softmax")


def broadcast_concat(visual: Tensor, attributes: Tensor) -> Tensor:
    """Tile a per-sample attribute vector over H and W and append it as channels.

    ``visual`` is (..., H, W, C) and ``attributes`` is (..., A); the result is
    (..., H, W, C + A).
    """
    attributes = as_tensor(attributes)
    if visual.ndim < 3:
        raise ShapeError(f"visual must be (..., H, W, C), got {visual.shape}")
    lead, (h, w, _) = visual.shape[:-3], visual.shape[-3:]
    if attributes.ndim < 1 or attributes.shape[:-1] != lead or attributes.shape[-1] < 1:
        raise ShapeError(f"attributes {attributes.shape} do not match visual batch {lead}")
    a = attributes.shape[-1]
    tiled = broadcast_to(reshape(attributes, (*lead, 1, 1, a)), (*lead, h, w, a))
    return concat([visual, tiled], axis=-1)


def squared_distances(queries: Tensor, prototypes: Tensor) -> Tensor:
    """Pairwise squared Euclidean distances, (Q, D) x (N, D) -> (Q, N)."""
    if queries.ndim != 2 or prototypes.ndim != 2 or queries.shape[1] != prototypes.shape[1]:
        raise ShapeError(f"cannot compare {queries.shape} with {prototypes.shape}")
    q, p = queries.data, prototypes.data
    diff = q[:, None, :] - p[None, :, :]
    out = (diff * diff).sum(axis=-1)

    def bw(g):
        w = 2.0 * g[:, :, None] * diff
        return w.sum(axis=1), -w.sum(axis=0)

    return make_result(out, (queries, prototypes), bw, "squared_distances")


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform init on [-b, b] with b = sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)
