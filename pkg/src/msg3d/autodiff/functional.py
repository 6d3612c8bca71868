"""Neural-network primitives with hand-written backward passes.

Feature tensors are channel-last. Temporal ops take ``(..., T, N, C)``:
any leading batch axes, then frames, joints, channels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, make_result, matmul


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return make_result(out, (x,), lambda g: (g * (out > 0),), "relu")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def multiscale_graph_conv(x: Tensor, operators, weights) -> Tensor:
    """``sum_s A_s X W_s`` over node axis -2 and channel axis -1 of ``x``.

    Works in a node-major layout so every product is one large GEMM, and
    accumulates the scale terms in ascending order. Each product is
    associated on the narrower side of ``W_s``.
    """
    operators, weights = list(operators), list(weights)
    if not operators or len(operators) != len(weights):
        raise ValueError("need one weight per operator")
    v, c = x.shape[-2:]
    d = weights[0].shape[1]
    lead = x.shape[:-2]
    m = x.size // (v * c)
    xt = np.ascontiguousarray(np.swapaxes(x.data.reshape(m, v, c), 0, 1))
    x_rows = xt.reshape(v * m, c)
    a_data = [a.data for a in operators]
    w_data = [w.data for w in weights]
    aggregate_first = c <= d
    saved = []
    out = None
    for a, w in zip(a_data, w_data):
        if aggregate_first:
            ax = (a @ xt.reshape(v, m * c)).reshape(v * m, c)
            term = ax @ w
        else:
            ax = (x_rows @ w).reshape(v, m * d)
            term = a @ ax
        saved.append(ax)
        term = term.reshape(v * m * d)
        if out is None:
            out = term
        else:
            out += term
    result = np.swapaxes(out.reshape(v, m, d), 0, 1).reshape(lead + (v, d))

    def grad_fn(g):
        gt = np.ascontiguousarray(np.swapaxes(g.reshape(m, v, d), 0, 1))
        g_rows = gt.reshape(v * m, d)
        g_ops, g_ws = [], []
        gx = np.zeros((v, m * c), dtype=xt.dtype) if x.requires_grad else None
        for a, w, ax, op in zip(a_data, w_data, saved, operators):
            if aggregate_first:
                g_ws.append(ax.T @ g_rows)
                g_ax = (g_rows @ w.T).reshape(v, m * c)
                g_ops.append(g_ax @ xt.reshape(v, m * c).T if op.requires_grad else None)
                if gx is not None:
                    gx += a.T @ g_ax
            else:
                g_full = gt.reshape(v, m * d)
                g_ops.append(g_full @ ax.T if op.requires_grad else None)
                g_ax = (a.T @ g_full).reshape(v * m, d)
                g_ws.append(x_rows.T @ g_ax)
                if gx is not None:
                    gx += (g_ax @ w.T).reshape(v, m * c)
        if gx is not None:
            gx = np.swapaxes(gx.reshape(v, m, c), 0, 1).reshape(x.shape)
        return (gx, *g_ops, *g_ws)

    return make_result(result, (x, *operators, *weights), grad_fn, "multiscale_graph_conv")


# -- batch normalization ---------------------------------------------------------

@dataclass
class BatchNormState:
    """Affine parameters and running statistics for one channel axis."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float64, gamma=None, beta=None) -> "BatchNormState":
        gamma = gamma if gamma is not None else Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        beta = beta if beta is not None else Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        return cls(gamma, beta, np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def _channel_sum(a2: np.ndarray) -> np.ndarray:
    # column sums of a (rows, C) array as a gemv; much faster than a strided reduce
    return np.ones(a2.shape[0], dtype=a2.dtype) @ a2


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize every channel (last axis) over all remaining axes.

    In training mode the batch moments are used and the running estimates are
    updated as ``running = momentum * running + (1 - momentum) * batch``
    (unbiased variance). Evaluation mode uses the running estimates.
    """
    xd = x.data
    c = xd.shape[-1]
    x2 = xd.reshape(-1, c)
    count = x2.shape[0]
    gamma, beta = state.gamma, state.beta
    gd, bd = gamma.data, beta.data
    eps = state.eps

    if training:
        mu = _channel_sum(x2) / count
        xhat = x2 - mu
        var = np.einsum("ij,ij->j", xhat, xhat) / count
        inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
        xhat *= inv_std
        m = state.momentum
        unbiased = var * count / max(count - 1, 1)
        state.running_mean = (m * state.running_mean + (1 - m) * mu).astype(xd.dtype)
        state.running_var = (m * state.running_var + (1 - m) * unbiased).astype(xd.dtype)
        out = (xhat * gd + bd).reshape(xd.shape)

        def grad_fn(g):
            g2 = g.reshape(-1, c)
            g_beta = _channel_sum(g2)
            g_gamma = np.einsum("ij,ij->j", g2, xhat)
            gx = None
            if x.requires_grad:
                gx = (g2 - g_beta / count - xhat * (g_gamma / count)) * (gd * inv_std)
                gx = gx.reshape(xd.shape)
            return gx, g_gamma, g_beta

        return make_result(out, (x, gamma, beta), grad_fn, "batch_norm")

    inv_std = (1.0 / np.sqrt(state.running_var + eps)).astype(xd.dtype)
    xhat = (x2 - state.running_mean) * inv_std
    out = (xhat * gd + bd).reshape(xd.shape)

    def grad_fn_eval(g):
        g2 = g.reshape(-1, c)
        gx = (g2 * (gd * inv_std)).reshape(xd.shape)
        return gx, np.einsum("ij,ij->j", g2, xhat), _channel_sum(g2)

    return make_result(out, (x, gamma, beta), grad_fn_eval, "batch_norm")


# -- temporal operators --------------------------------------------------------------

def _as_btnc(shape: tuple[int, ...]) -> tuple[int, int, int, int]:
    if len(shape) < 3:
        raise ValueError(f"expected (..., T, N, C), got shape {shape}")
    lead = int(np.prod(shape[:-3])) if len(shape) > 3 else 1
    return lead, shape[-3], shape[-2], shape[-1]


def out_length(length: int, stride: int) -> int:
    return -(-length // stride)


def temporal_conv(x: Tensor, weight: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
    """1-D convolution along the frame axis, shared over joints.

    ``weight`` has shape ``(k, C_in, C_out)`` with odd ``k``; tap ``j`` reads
    frame ``t * stride + dilation * (j - (k - 1) / 2)`` and frames outside
    the sequence read zeros, so the output has ``ceil(T / stride)`` frames.
    """
    k, cin, cout = weight.shape
    if k % 2 != 1:
        raise ValueError("temporal kernel size must be odd")
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    B, T, N, C = _as_btnc(x.shape)
    if C != cin:
        raise ValueError(f"channel mismatch: input has {C}, kernel expects {cin}")
    lead_shape = x.shape[:-3]
    t_out = out_length(T, stride)
    half = dilation * (k - 1) // 2
    xd = x.data.reshape(B, T, N, C)
    wd = weight.data
    xp = np.pad(xd, ((0, 0), (half, half), (0, 0), (0, 0))) if half else xd
    span = stride * (t_out - 1) + 1

    def tap(j):
        start = j * dilation
        return np.ascontiguousarray(xp[:, start:start + span:stride]).reshape(-1, C)

    out = None
    for j in range(k):
        term = tap(j) @ wd[j]
        out = term if out is None else out + term
    out = out.reshape(lead_shape + (t_out, N, cout))

    def grad_fn(g):
        g2 = g.reshape(-1, cout)
        gx = gw = None
        if weight.requires_grad:
            gw = np.stack([tap(j).T @ g2 for j in range(k)])
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                start = j * dilation
                gxp[:, start:start + span:stride] += (g2 @ wd[j].T).reshape(B, t_out, N, C)
            gx = gxp[:, half:half + T] if half else gxp
            gx = gx.reshape(x.shape)
        return gx, gw

    return make_result(out, (x, weight), grad_fn, "temporal_conv")


def window_gather(x: Tensor, tau: int, dilation: int = 1, stride: int = 1) -> Tensor:
    """Sliding spatial-temporal windows, frame-major within each window.

    ``(..., T, N, C) -> (..., ceil(T / stride), tau * N, C)``; window ``t``
    is centered on frame ``t * stride`` and gathers frames
    ``t * stride + dilation * (j - (tau - 1) / 2)`` for ``j = 0..tau-1``.
    Frames outside the sequence contribute zero features.
    """
    if tau < 1 or tau % 2 != 1:
        raise ValueError(f"window size must be a positive odd integer, got {tau}")
    if dilation < 1 or stride < 1:
        raise ValueError("dilation and stride must be >= 1")
    B, T, N, C = _as_btnc(x.shape)
    lead_shape = x.shape[:-3]
    t_out = out_length(T, stride)
    half = dilation * (tau - 1) // 2
    span = stride * (t_out - 1) + 1
    xd = x.data.reshape(B, T, N, C)
    xp = np.pad(xd, ((0, 0), (half, half), (0, 0), (0, 0))) if half else xd
    slabs = [xp[:, j * dilation:j * dilation + span:stride] for j in range(tau)]
    out = np.stack(slabs, axis=2).reshape(lead_shape + (t_out, tau * N, C))

    def grad_fn(g):
        g5 = g.reshape(B, t_out, tau, N, C)
        gxp = np.zeros_like(xp)
        for j in range(tau):
            start = j * dilation
            gxp[:, start:start + span:stride] += g5[:, :, j]
        gx = gxp[:, half:half + T] if half else gxp
        return (gx.reshape(x.shape),)

    return make_result(out, (x,), grad_fn, "window_gather")


def frame_stride(x: Tensor, stride: int) -> Tensor:
    """Keep every ``stride``-th frame of ``(..., T, N, C)``."""
    if stride == 1:
        return x
    index = (Ellipsis, slice(None, None, stride), slice(None), slice(None))
    return x[index]


# -- classification heads ---------------------------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    p = _softmax(logits.data)

    def grad_fn(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return make_result(p, (logits,), grad_fn, "softmax")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    z = logits.data
    if z.ndim != 2:
        raise ValueError("logits must be (batch, classes)")
    labels = np.asarray(labels, dtype=np.int64)
    b, k = z.shape
    if labels.shape != (b,):
        raise ValueError("need one label per row")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError("label out of range")
    shifted = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(b)
    loss = np.mean(logsum - shifted[rows, labels])

    def grad_fn(g):
        p = _softmax(z)
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return make_result(np.asarray(loss, dtype=z.dtype), (logits,), grad_fn, "softmax_cross_entropy")


__all__ = [
    "BatchNormState", "batch_norm", "frame_stride", "linear", "out_length", "relu", "softmax",
    "softmax_cross_entropy", "temporal_conv", "window_gather", "as_tensor",
]
