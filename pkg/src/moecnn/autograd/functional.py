"""Differentiable neural-network ops on :class:`Tensor`."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, relu  # noqa: F401  (re-exported)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C, Ho, Wo, kh, kw) -> (B, Ho, Wo, C, kh, kw)
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[B,C,H,W]`` with ``weight[F,C,kh,kw]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    B, C, H, W = x.shape
    F, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ValueError(f"kernel {weight.shape} does not fit padded input {x.shape}")
    if bias is not None and bias.shape != (F,):
        raise ValueError(f"bias shape {bias.shape} does not match {F} filters")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1

    cols = _im2col(x.data, kh, kw, stride, padding).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(F, -1)
    y = cols @ wmat.T
    if bias is not None:
        y += bias.data
    y = np.ascontiguousarray(y.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor._make(y, parents, "conv2d")
    if not out.requires_grad:
        return out

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gpad = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gpad[:, :, padding:padding + H, padding:padding + W] if padding else gpad
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    out._backward = backward
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-sample affine map ``x @ weight.T + bias`` for ``x[B,D]``, ``weight[O,D]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear dimension mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor._make(y, parents, "linear")
    if out.requires_grad:
        def backward(g):
            grads = [g @ weight.data, g.T @ x.data]
            if bias is not None:
                grads.append(g.sum(axis=0))
            return tuple(grads)
        out._backward = backward
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean: ``[B,C,H,W] -> [B,C]``."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects a 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    out = Tensor._make(x.data.mean(axis=(2, 3)), (x,), "gap")
    if out.requires_grad:
        scale = 1.0 / (H * W)
        out._backward = lambda g: (np.broadcast_to((g * scale)[:, :, None, None], x.shape).copy(),)
    return out


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as in common frameworks); in eval
    mode the running buffers are used.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise ValueError(f"batchnorm2d: input {x.shape} vs {gamma.shape[0]} channels")
    B, C, H, W = x.shape
    shape = (1, C, 1, 1)
    if training:
        n = B * H * W
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu.reshape(shape)
        var = (xc * xc).mean(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        xc = x.data - running_mean.reshape(shape).astype(x.dtype)
        var = running_var.astype(x.dtype)
    with np.errstate(over="ignore", invalid="ignore"):  # caught by the finiteness check below
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(shape)
        y = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    out = Tensor._make(y.astype(x.dtype, copy=False), (x, gamma, beta), "batchnorm2d")
    if not out.requires_grad:
        return out

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(shape)
        if training:
            gx = (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                  - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)) * inv.reshape(shape)
        else:
            gx = gxhat * inv.reshape(shape)
        return gx, ggamma, gbeta

    out._backward = backward
    return out


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable boolean, True = keep) removes entries before
    normalization; removed entries come out exactly 0.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax mask removes every entry of a row")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._make(y.astype(x.dtype, copy=False), (x,), "softmax")
    if out.requires_grad:
        out._backward = lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return out


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    out = Tensor._make(y, (x,), "log_softmax")
    if out.requires_grad:
        p = np.exp(y)
        out._backward = lambda g: (g - p * g.sum(axis=-1, keepdims=True),)
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    num_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label index outside [0, {num_classes})")
    B = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(B), labels].mean()
    out = Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy")
    if out.requires_grad:
        def backward(g):
            grad = np.exp(logp)
            grad[np.arange(B), labels] -= 1.0
            return (grad * (g / B),)
        out._backward = backward
    return out
