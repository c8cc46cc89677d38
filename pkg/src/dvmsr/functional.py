"""Differentiable operators used by the network: convolutions, projections,
normalization and the depth-to-space upsampler."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import (
    Tensor,
    add,
    exp,
    flip,
    leaky_relu,
    mul,
    silu,
    softplus,
    tabs,
    square,
    concat,
)

__all__ = [
    "ConfigError",
    "conv2d",
    "conv1d_causal",
    "linear",
    "layer_norm",
    "silu",
    "softplus",
    "leaky_relu",
    "exp",
    "flip",
    "tabs",
    "square",
    "concat",
    "hadamard",
    "add",
    "pixel_shuffle",
    "pixel_unshuffle",
]


class ConfigError(ValueError):
    """Shapes or hyperparameters that cannot be combined."""


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigError(f"hadamard needs equal shapes, got {a.shape} and {b.shape}")
    return mul(a, b)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation over NCHW input with an OIkk weight."""
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ConfigError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if stride < 1:
        raise ConfigError("conv2d: stride must be >= 1")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d: empty output for input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (n, ho, wo, cin*kh*kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bwd(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (gm.T @ cols).reshape(weight.shape)
        gb = gm.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[
                        :, :,
                        i : i + stride * (ho - 1) + 1 : stride,
                        j : j + stride * (wo - 1) + 1 : stride,
                    ] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(np.ascontiguousarray(out), parents, bwd, "conv2d")


def conv1d_causal(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depthwise causal convolution over the token axis of (N, L, D) input.

    Output at position t sees positions max(0, t-k+1)..t only; the sequence
    is left-padded with zeros.
    """
    n, length, d = x.shape
    wd, k = weight.shape
    if wd != d:
        raise ConfigError(f"conv1d_causal: input has {d} channels, weight {wd}")
    xp = np.pad(x.data, ((0, 0), (k - 1, 0), (0, 0)))
    wt = weight.data
    out = np.zeros((n, length, d))
    for j in range(k):
        out += xp[:, j : j + length, :] * wt[:, j]
    if bias is not None:
        out += bias.data

    def bwd(g):
        gw = np.empty_like(wt)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gw[:, j] = np.einsum("nld,nld->d", g, xp[:, j : j + length, :])
            gxp[:, j : j + length, :] += g * wt[:, j]
        gx = gxp[:, k - 1 :, :]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1))

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out, parents, bwd, "conv1d_causal")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ W.T + b over the trailing axis."""
    dout, din = weight.shape
    if x.shape[-1] != din:
        raise ConfigError(f"linear: trailing extent {x.shape[-1]} != {din}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    wt = weight.data
    out = x2 @ wt.T
    if bias is not None:
        out += bias.data

    def bwd(g):
        g2 = g.reshape(-1, dout)
        gx = (g2 @ wt).reshape(lead + (din,)) if x.requires_grad else None
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out.reshape(lead + (dout,)), parents, bwd, "linear")


def layer_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5
) -> Tensor:
    """Normalize each token over the last axis (biased variance), then scale/shift."""
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bwd(g):
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gh = g * gamma.data
        gx = rstd * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    if gamma.shape != (d,) or beta.shape != (d,):
        raise ConfigError(f"layer_norm: affine params must have shape ({d},)")
    return Tensor.from_op(out, (x, gamma, beta), bwd, "layer_norm")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(N, C*r*r, H, W) -> (N, C, r*H, r*W); channel block (c, i, j) lands at offset (i, j)."""
    n, c, h, w = x.shape
    if c % (r * r):
        raise ConfigError(f"pixel_shuffle: {c} channels not divisible by {r * r}")
    co = c // (r * r)
    y = x.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return y.reshape(n, co, h * r, w * r)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ConfigError(f"pixel_unshuffle: {h}x{w} not divisible by {r}")
    y = x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return y.reshape(n, c * r * r, h // r, w // r)
