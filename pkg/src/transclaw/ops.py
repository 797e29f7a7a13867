"""Differentiable neural operators: convolution, pooling, normalization,
attention primitives, activations, and the segmentation loss.

Each operator implements both the forward rule and a hand-derived backward
rule registered on the tape via ``make_output``.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, channel_affine, make_output, no_grad

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation plus bias.

    ``x`` is (B, C_in, H, W) and ``weight`` is (C_out, C_in, k, k). Output
    spatial extent is floor((H + 2*padding - k) / stride) + 1.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input/weight, got {x.shape} and {weight.shape}")
    B, C_in, H, W = x.shape
    C_out, C_w, k, _ = weight.shape
    if C_w != C_in:
        raise ShapeError(f"conv2d: input channels {C_in} do not match weight channels {C_w}")
    H_out = (H + 2 * padding - k) // stride + 1
    W_out = (W + 2 * padding - k) // stride + 1
    if H_out < 1 or W_out < 1:
        raise ShapeError(f"conv2d: degenerate output extent {H_out}x{W_out} "
                         f"for input {H}x{W}, kernel {k}, stride {stride}, padding {padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # (B, C_in, H_out, W_out, k, k) view; no copy
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        if bias.shape != (C_out,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {C_out} channels")
        out += bias.data.reshape(1, C_out, 1, 1)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gw = gx = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for dy in range(k):
                for dx in range(k):
                    # scatter each tap back onto the padded input
                    t = np.tensordot(g, weight.data[:, :, dy, dx], axes=([1], [0]))
                    gxp[:, :,
                        dy:dy + stride * H_out:stride,
                        dx:dx + stride * W_out:stride] += t.transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
            gx = np.ascontiguousarray(gx)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_output("conv2d", out, inputs, bwd)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route to the first element in
    row-major window order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2d: spatial extents {H}x{W} must be even")
    H2, W2 = H // 2, W // 2
    tiles = x.data.reshape(B, C, H2, 2, W2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H2, W2, 4)
    idx = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gt = np.zeros_like(tiles)
        np.put_along_axis(gt, idx[..., None], g[..., None], axis=-1)
        gx = gt.reshape(B, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (np.ascontiguousarray(gx),)

    return make_output("maxpool2d", out, (x,), bwd)


def avgpool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean pooling by an integer factor (downsampling for
    claw skip resampling)."""
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d: expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if factor < 1 or H % factor or W % factor:
        raise ShapeError(f"avgpool2d: extents {H}x{W} not divisible by factor {factor}")
    Hs, Ws = H // factor, W // factor
    out = x.data.reshape(B, C, Hs, factor, Ws, factor).mean(axis=(3, 5))
    inv_area = 1.0 / (factor * factor)

    def bwd(g):
        gx = np.repeat(np.repeat(g * inv_area, factor, axis=2), factor, axis=3)
        return (gx,)

    return make_output("avgpool2d", out, (x,), bwd)


def _bilinear_taps(n: int):
    # output pixel centers mapped back with the align-corners=false convention
    src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    floor = np.floor(src)
    lo = np.clip(floor, 0, n - 1).astype(np.intp)
    hi = np.clip(floor + 1, 0, n - 1).astype(np.intp)
    w = src - floor
    return lo, hi, w


def upsample2x(x: Tensor, mode: str = "bilinear") -> Tensor:
    """Double both spatial extents by bilinear interpolation (align-corners
    false) or nearest-neighbor replication."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2x: expected 4-D input, got {x.shape}")
    if mode not in ("bilinear", "nearest"):
        raise ShapeError(f"upsample2x: unknown mode {mode!r}")
    B, C, H, W = x.shape

    if mode == "nearest":
        out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

        def bwd(g):
            return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

        return make_output("upsample_nearest2x", out, (x,), bwd)

    lo_r, hi_r, w_r = _bilinear_taps(H)
    lo_c, hi_c, w_c = _bilinear_taps(W)
    wr = w_r.astype(x.dtype)[None, None, :, None]
    wc = w_c.astype(x.dtype)[None, None, None, :]
    rows = x.data[:, :, lo_r, :] * (1.0 - wr) + x.data[:, :, hi_r, :] * wr
    out = rows[:, :, :, lo_c] * (1.0 - wc) + rows[:, :, :, hi_c] * wc
    out = out.astype(x.dtype, copy=False)

    def bwd(g):
        grows = np.zeros((B, C, 2 * H, W), dtype=g.dtype)
        np.add.at(grows, (slice(None), slice(None), slice(None), lo_c), g * (1.0 - wc))
        np.add.at(grows, (slice(None), slice(None), slice(None), hi_c), g * wc)
        gx = np.zeros((B, C, H, W), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), lo_r), grows * (1.0 - wr))
        np.add.at(gx, (slice(None), slice(None), hi_r), grows * wr)
        return (gx,)

    return make_output("upsample_bilinear2x", out, (x,), bwd)


def _norm_backward(g, xhat, inv_std, axes):
    # shared by batch and layer norm: x_hat = (x - mean) * inv_std, biased var
    gm = g.mean(axis=axes, keepdims=True)
    gxm = (g * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (g - gm - xhat * gxm)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
                 running_var: Tensor, momentum: float = 0.1, eps: float = 1e-5,
                 training: bool = True) -> Tensor:
    """Per-channel normalization over (batch, H, W), affine applied last.

    Training mode normalizes by batch statistics and blends them into the
    running buffers; inference mode normalizes by the running buffers.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d: expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if training:
        if B * H * W < 2:
            raise ShapeError(f"batch_norm2d: population {B * H * W} per channel is "
                             "too small for training statistics")
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        with no_grad():
            running_mean.data *= 1.0 - momentum
            running_mean.data += momentum * mean.reshape(C)
            running_var.data *= 1.0 - momentum
            running_var.data += momentum * var.reshape(C)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean) * inv_std

        def bwd(g):
            return (_norm_backward(g, xhat, inv_std, (0, 2, 3)),)

        normalized = make_output("batch_norm2d", xhat, (x,), bwd)
    else:
        inv_std = (1.0 / np.sqrt(running_var.data + eps)).reshape(1, C, 1, 1)
        shift = running_mean.data.reshape(1, C, 1, 1)
        xhat = (x.data - shift) * inv_std

        def bwd(g):
            return (g * inv_std,)

        normalized = make_output("batch_norm2d", xhat, (x,), bwd)
    return channel_affine(normalized, gamma, beta, axis=1)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each token over the last axis, then apply the affine."""
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match feature extent {D}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def bwd(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gx = _norm_backward(g * gamma.data, xhat, inv_std, (x.ndim - 1,))
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=lead)
        if beta.requires_grad:
            gbeta = g.sum(axis=lead)
        return gx, ggamma, gbeta

    return make_output("layer_norm", out, (x, gamma, beta), bwd)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: x @ weight + bias, weight (D_in, D_out)."""
    D_in, D_out = weight.shape
    if x.shape[-1] != D_in:
        raise ShapeError(f"linear: input extent {x.shape} does not match weight {weight.shape}")
    lead_shape = x.shape[:-1]
    x2 = x.data.reshape(-1, D_in)
    out = x2 @ weight.data
    if bias is not None:
        if bias.shape != (D_out,):
            raise ShapeError(f"linear: bias shape {bias.shape} does not match {D_out} outputs")
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g2 = g.reshape(-1, D_out)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_output("linear", out.reshape(*lead_shape, D_out), inputs, bwd)


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a bias shared across the leading axis (position embeddings).

    ``bias.shape`` must equal ``x.shape[1:]``; the gradient for the bias sums
    over the leading axis. This is the only leading-axis broadcast the engine
    provides, kept explicit so backward rules stay auditable.
    """
    if bias.shape != x.shape[1:]:
        raise ShapeError(f"bias_add: bias shape {bias.shape} does not match "
                         f"trailing extents of {x.shape}")
    return make_output("bias_add", x.data + bias.data, (x, bias),
                       lambda g: (g, g.sum(axis=0)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_output("relu", np.where(mask, x.data, 0.0).astype(x.dtype, copy=False),
                       (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    u = SQRT_2_OVER_PI * (x.data + GELU_CUBIC * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def bwd(g):
        du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du),)

    return make_output("gelu", out, (x,), bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by row-max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_output("softmax", y, (x,), bwd)


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean pixelwise negative log-likelihood of integer class targets.

    ``logits`` is (B, K, H, W); ``target`` holds class indices with shape
    (B, H, W). Computed through the log-sum-exp stabilized form.
    """
    if logits.ndim != 4:
        raise ShapeError(f"cross_entropy: expected (B, K, H, W) logits, got {logits.shape}")
    B, K, H, W = logits.shape
    target = np.asarray(target)
    if target.shape != (B, H, W):
        raise ShapeError(f"cross_entropy: target shape {target.shape} does not match "
                         f"logits {logits.shape}")
    if target.min() < 0 or target.max() >= K:
        raise ShapeError(f"cross_entropy: class index outside [0, {K})")
    t = target.astype(np.intp)

    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse  # (B, K, H, W) log-probabilities
    picked = np.take_along_axis(logp, t[:, None], axis=1)[:, 0]
    n_pix = B * H * W
    loss = -picked.sum() / n_pix

    b_ix = np.arange(B)[:, None, None]
    h_ix = np.arange(H)[None, :, None]
    w_ix = np.arange(W)[None, None, :]

    def bwd(g):
        grad = np.exp(logp)
        grad[b_ix, t, h_ix, w_ix] -= 1.0
        return (grad * (float(g) / n_pix),)

    return make_output("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), bwd)
