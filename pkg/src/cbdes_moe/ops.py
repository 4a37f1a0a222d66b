"""Differentiable ops over :class:`~cbdes_moe.tensor.Tensor`.

Outside graph recording (``no_grad`` or no input needs gradients) conv2d
and linear run one matmul per sample, so an image's result never depends on
the rest of the batch. While recording they use a single flat matmul, which
is faster but not bitwise batch-invariant under BLAS.
"""

from __future__ import annotations

import math
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ConfigError, ShapeError, Tensor, as_tensor, is_grad_enabled, make_result

NORM_EPS = 1e-5
NORM_MOMENTUM = 0.1


def _recording(*tensors) -> bool:
    return is_grad_enabled() and any(t is not None and t.requires_grad for t in tensors)


def _rowwise_matmul(x: np.ndarray, w: np.ndarray, per_sample: bool) -> np.ndarray:
    """``x[B, M, K] @ w[K, N]``; per-sample BLAS calls when ``per_sample``."""
    if per_sample:
        return np.matmul(x, w)
    B, M, K = x.shape
    return (x.reshape(B * M, K) @ w).reshape(B, M, -1)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), backward, "mul")


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return make_result(np.sum(x.data, axis=axis), (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    if count == 0:
        raise ShapeError("mean", "cannot average over an empty axis")

    def backward(g):
        g = g / count
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return make_result(np.mean(x.data, axis=axis), (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return make_result(x.data.transpose(axes), (x,), backward, "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, numpy broadcasting rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", "operands need at least 2 dims", got=(a.shape, b.shape))
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", "inner dimensions differ", expected=a.shape[-1], got=b.shape[-2])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# convolution and pooling


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``[B,Cin,H,W]`` with ``[Cout,Cin,kh,kw]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", "expected 4-D input and weight", got=(x.shape, weight.shape))
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = weight.shape
    if C != Cin:
        raise ShapeError("conv2d", "input channels do not match weight", expected=Cin, got=C)
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d", "kernel size must be odd", got=(kh, kw))
    if stride < 1:
        raise ShapeError("conv2d", "stride must be >= 1", got=stride)
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError("conv2d", "kernel larger than padded input", expected=(kh, kw), got=(H, W))
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError("conv2d", "bias length", expected=(Cout,), got=bias.shape)

    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if kh == 1 and kw == 1:
        patches = xp[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        cols = patches.reshape(B, C, Ho * Wo).transpose(0, 2, 1)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        # [B,C,Ho,Wo,kh,kw] -> [B,Ho*Wo,C*kh*kw]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(Cout, -1)
    out = _rowwise_matmul(cols, wmat.T, not _recording(x, weight, bias))  # [B,Ho*Wo,Cout]
    if bias is not None:
        out += bias.data
    out = out.transpose(0, 2, 1).reshape(B, Cout, Ho, Wo)

    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))

    def backward(g):
        gm = g.reshape(B, Cout, Ho * Wo).transpose(0, 2, 1)  # [B,HoWo,Cout]
        gw = np.tensordot(gm, cols, axes=([0, 1], [0, 1])).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(gm, wmat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros(xp.shape)
            hspan, wspan = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + hspan : stride, j : j + wspan : stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(dxp[:, :, padding : padding + H, padding : padding + W] if padding else dxp)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], padding: int = 1) -> Tensor:
    """Per-channel stride-1 convolution; ``weight`` is ``[C,1,k,k]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    B, C, H, W = x.shape
    if weight.ndim != 4 or weight.shape[0] != C or weight.shape[1] != 1:
        raise ShapeError("depthwise_conv2d", "weight must be [C,1,k,k]", expected=(C, 1), got=weight.shape)
    kh, kw = weight.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("depthwise_conv2d", "kernel size must be odd", got=(kh, kw))
    Ho, Wo = _conv_out(H, kh, 1, padding), _conv_out(W, kw, 1, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    w = weight.data[:, 0]
    out = np.zeros((B, C, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + Ho, j : j + Wo] * w[None, :, i, j, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))

    def backward(g):
        gw = np.zeros_like(weight.data)
        dxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gw[:, 0, i, j] = np.sum(g * xp[:, :, i : i + Ho, j : j + Wo], axis=(0, 2, 3))
                dxp[:, :, i : i + Ho, j : j + Wo] += g * w[None, :, i, j, None, None]
        gx = dxp[:, :, padding : padding + H, padding : padding + W] if padding else dxp
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result(out, parents, backward, "depthwise_conv2d")


def _windows2x2(data: np.ndarray, op: str) -> np.ndarray:
    if data.ndim != 4:
        raise ShapeError(op, "expected [B,C,H,W]", got=data.shape)
    B, C, H, W = data.shape
    if H % 2 or W % 2:
        raise ShapeError(op, "spatial dims must be even", got=(H, W))
    # [B,C,H/2,W/2,4] with window cells in row-major order
    return data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)


def _unwindow2x2(win: np.ndarray) -> np.ndarray:
    B, C, h, w, _ = win.shape
    return win.reshape(B, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * h, 2 * w)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties send the gradient to the first cell in row-major order."""
    x = as_tensor(x)
    win = _windows2x2(x.data, "maxpool2x2")
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros(win.shape)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        return (_unwindow2x2(gwin),)

    return make_result(out, (x,), backward, "maxpool2x2")


def avgpool2x2(x: Tensor) -> Tensor:
    x = as_tensor(x)
    win = _windows2x2(x.data, "avgpool2x2")
    out = win.mean(axis=-1)

    def backward(g):
        return (_unwindow2x2(np.repeat(g[..., None] / 4.0, 4, axis=-1)),)

    return make_result(out, (x,), backward, "avgpool2x2")


# ---------------------------------------------------------------------------
# normalization and activations


class RunningStats:
    """Per-channel running mean/variance used by :func:`channel_norm` in eval mode."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)


def channel_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_stats: RunningStats,
    training: bool,
    momentum: float = NORM_MOMENTUM,
    eps: float = NORM_EPS,
) -> Tensor:
    """Batch normalization over ``(B,H,W)`` for every channel of ``[B,C,H,W]``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError("channel_norm", "expected [B,C,H,W]", got=x.shape)
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("channel_norm", "gamma/beta length", expected=(C,), got=(gamma.shape, beta.shape))
    n = B * H * W
    if n == 0:
        raise ShapeError("channel_norm", "empty batch")

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_stats.mean *= 1.0 - momentum
        running_stats.mean += momentum * mu
        running_stats.var *= 1.0 - momentum
        running_stats.var += momentum * var
    else:
        mu, var = running_stats.mean.copy(), running_stats.var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        ggamma = np.sum(g * xhat, axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = np.sum(dxhat * xhat, axis=(0, 2, 3))[None, :, None, None]
            gx = (inv[None, :, None, None] / n) * (n * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "channel_norm")


def prelu(x: Tensor, alpha: Tensor) -> Tensor:
    """``x`` where ``x >= 0`` else ``alpha * x``; ``alpha`` is scalar or one per channel (axis 1)."""
    x, alpha = as_tensor(x), as_tensor(alpha)
    if alpha.ndim != 1 or (alpha.shape[0] != 1 and (x.ndim < 2 or alpha.shape[0] != x.shape[1])):
        raise ShapeError("prelu", "alpha must have length 1 or match dim 1", got=alpha.shape)
    shape = [1] * x.ndim
    if alpha.shape[0] != 1:
        shape[1] = alpha.shape[0]
    a = alpha.data.reshape(shape)
    neg = x.data < 0
    out = np.where(neg, a * x.data, x.data)

    def backward(g):
        gx = np.where(neg, a * g, g)
        ga = np.where(neg, g * x.data, 0.0)
        if alpha.shape[0] == 1:
            ga = np.array([ga.sum()])
        else:
            axes = tuple(i for i in range(x.ndim) if i != 1)
            ga = ga.sum(axis=axes)
        return gx, ga

    return make_result(out, (x, alpha), backward, "prelu")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", "input features do not match weight", expected=weight.shape[1:], got=x.shape[-1:])
    Dout, Din = weight.shape
    if bias is not None and bias.shape != (Dout,):
        raise ShapeError("linear", "bias length", expected=(Dout,), got=bias.shape)
    lead = x.shape[:-1]
    b0 = lead[0] if lead else 1
    stacked = x.data.reshape(b0, -1, Din)
    out = _rowwise_matmul(stacked, weight.data.T, not _recording(x, weight, bias)).reshape(*lead, Dout)
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))

    def backward(g):
        g2 = g.reshape(-1, Dout)
        gw = g2.T @ x.data.reshape(-1, Din)
        gx = (g2 @ weight.data).reshape(x.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_result(out, parents, backward, "linear")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    D = x.shape[-1]
    if D == 0:
        raise ShapeError("layer_norm", "last dimension is empty")
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError("layer_norm", "gamma/beta length", expected=(D,), got=(gamma.shape, beta.shape))
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(x.ndim - 1))
        ggamma = np.sum(g * xhat, axis=lead)
        gbeta = np.sum(g, axis=lead)
        dxhat = g * gamma.data
        s1 = dxhat.sum(axis=-1, keepdims=True)
        s2 = np.sum(dxhat * xhat, axis=-1, keepdims=True)
        gx = (inv / D) * (D * dxhat - s1 - xhat * s2)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] < 1:
        raise ShapeError("softmax", "empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return make_result(y, (x,), backward, "softmax")


def mean_tokens(tokens: Tensor) -> Tensor:
    """Average ``[B,N,D]`` over the token axis."""
    tokens = as_tensor(tokens)
    if tokens.ndim != 3:
        raise ShapeError("mean_tokens", "expected [B,N,D]", got=tokens.shape)
    if tokens.shape[1] == 0:
        raise ShapeError("mean_tokens", "no tokens to average")
    return mean(tokens, axis=1)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", "expected [B,K] logits and [B] labels", got=(logits.shape, labels.shape))
    B = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(B), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (p * (g / B),)

    return make_result(np.asarray(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# attention


def multi_head_attention(
    tokens: Tensor,
    params: Mapping[str, Tensor],
    heads: int,
    kv_tokens: Optional[Tensor] = None,
    groups: int = 1,
) -> Tensor:
    """Scaled dot-product attention with ``heads`` heads.

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo``. Queries come from
    ``tokens`` and keys/values from ``kv_tokens`` (self-attention when None).
    With ``groups > 1`` the token axis is split into that many contiguous,
    equally sized groups and attention is restricted to within each group.
    """
    tokens = as_tensor(tokens)
    kv = tokens if kv_tokens is None else as_tensor(kv_tokens)
    if tokens.ndim != 3 or kv.ndim != 3:
        raise ShapeError("multi_head_attention", "expected [B,N,D] tokens", got=(tokens.shape, kv.shape))
    B, N, D = tokens.shape
    M = kv.shape[1]
    if heads < 1 or D % heads:
        raise ConfigError(f"embedding dim {D} is not divisible by heads={heads}")
    if groups < 1 or N % groups or M % groups:
        raise ShapeError("multi_head_attention", "token count not divisible by groups", expected=groups, got=(N, M))
    dh = D // heads

    def split(t: Tensor, n: int) -> Tensor:
        # [B, n, D] -> [B, groups, heads, n/groups, dh]
        return transpose(reshape(t, (B, groups, n // groups, heads, dh)), (0, 1, 3, 2, 4))

    q = split(linear(tokens, params["wq"], params["bq"]), N)
    k = split(linear(kv, params["wk"], params["bk"]), M)
    v = split(linear(kv, params["wv"], params["bv"]), M)
    scores = mul(matmul(q, transpose(k, (0, 1, 2, 4, 3))), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = reshape(transpose(matmul(attn, v), (0, 1, 3, 2, 4)), (B, N, D))
    return linear(ctx, params["wo"], params["bo"])


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return make_result(out, tensors, backward, "stack")
