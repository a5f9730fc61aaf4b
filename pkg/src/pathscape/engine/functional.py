"""Differentiable layers built from the primitives in :mod:`pathscape.engine.tensor`."""

from __future__ import annotations

import functools
import math

import numpy as np

from pathscape.engine.tensor import Tensor, as_tensor, exp, gather, log, matmul, no_grad, reshape, transpose

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


class DegenerateBatchError(ValueError):
    """Train-mode batch normalization over a single value per channel."""


@functools.lru_cache(maxsize=256)
def conv_index(in_channels: int, in_extent: tuple, kernel: tuple, stride: int, dilation: int, pad: int) -> np.ndarray:
    """im2col gather table of shape ``(positions, in_channels * prod(kernel))``.

    Entry ``[p, m]`` is the flat ``(channel, *spatial)`` input index read by output
    position ``p`` for column ``m``; ``-1`` marks reads that fall into zero padding.
    Columns are ordered row-major over ``(channel, *kernel)`` to match weight layout.
    """
    rank = len(in_extent)
    out_extent = tuple((n + 2 * pad - dilation * (k - 1) - 1) // stride + 1 for n, k in zip(in_extent, kernel))
    if min(out_extent) < 1:
        raise ValueError(f"kernel {kernel} does not fit extent {in_extent}")
    pos = np.stack(np.meshgrid(*[np.arange(n) for n in out_extent], indexing="ij"), -1).reshape(-1, rank)
    off = np.stack(np.meshgrid(*[np.arange(k) for k in kernel], indexing="ij"), -1).reshape(-1, rank)
    coords = pos[:, None, :] * stride + off[None, :, :] * dilation - pad
    inside = np.all((coords >= 0) & (coords < np.asarray(in_extent)), axis=-1)
    flat = np.ravel_multi_index(tuple(np.clip(coords, 0, np.asarray(in_extent) - 1).transpose(2, 0, 1)), in_extent)
    area = math.prod(in_extent)
    channel = np.arange(in_channels)[None, :, None] * area
    table = np.where(inside[:, None, :], flat[:, None, :] + channel, -1)
    table = table.reshape(len(pos), in_channels * len(off)).astype(np.int64)
    table.setflags(write=False)
    return table


def conv_out_extent(in_extent: tuple, kernel: tuple, stride: int, dilation: int, pad: int) -> tuple:
    return tuple((n + 2 * pad - dilation * (k - 1) - 1) // stride + 1 for n, k in zip(in_extent, kernel))


def conv(x, weight, bias=None, stride: int = 1, dilation: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (batch, C_in, *S) with ``weight`` (C_out, C_in, *K)."""
    x, weight = as_tensor(x), as_tensor(weight)
    rank = weight.ndim - 2
    if x.ndim != rank + 2:
        raise ValueError(f"input of rank {x.ndim} does not match a rank-{rank} kernel")
    batch, c_in = x.shape[:2]
    c_out, w_in = weight.shape[:2]
    if c_in != w_in:
        raise ValueError(f"input has {c_in} channels, weight expects {w_in}")
    in_extent, kernel = tuple(x.shape[2:]), tuple(weight.shape[2:])
    table = conv_index(c_in, in_extent, kernel, stride, dilation, pad)
    out_extent = conv_out_extent(in_extent, kernel, stride, dilation, pad)
    positions, columns = table.shape
    cols = gather(reshape(x, (batch, c_in * math.prod(in_extent))), table.ravel())
    cols = reshape(cols, (batch, positions, columns))
    out = matmul(cols, transpose(reshape(weight, (c_out, columns)), (1, 0)))
    out = reshape(transpose(out, (0, 2, 1)), (batch, c_out) + out_extent)
    if bias is not None:
        out = out + reshape(as_tensor(bias), (1, c_out) + (1,) * rank)
    return out


def relu(x) -> Tensor:
    """max(0, x), with derivative 0 at exactly 0."""
    x = as_tensor(x)
    return x * Tensor((x.data > 0).astype(np.float64))


def relu_mask(x) -> np.ndarray:
    return as_tensor(x).data > 0


def batchnorm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray, training: bool,
              eps: float = DEFAULT_EPS, momentum: float = DEFAULT_MOMENTUM) -> Tensor:
    """Per-channel z-scoring over batch and spatial axes, then the affine map.

    Train mode uses population statistics (divisor N) of the batch and updates the
    running buffers in place; eval mode uses the running buffers.
    """
    x = as_tensor(x)
    channels = x.shape[1]
    if as_tensor(gamma).shape != (channels,) or as_tensor(beta).shape != (channels,):
        raise ValueError(f"gamma/beta must have shape ({channels},)")
    view = (1, channels) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    if training:
        count = x.data.size // channels
        if count < 2:
            raise DegenerateBatchError("batch normalization in train mode needs more than one value per channel")
        mu = x.sum(axes, keepdims=True) * (1.0 / count)
        centered = x - mu
        var = (centered * centered).sum(axes, keepdims=True) * (1.0 / count)
        xhat = centered / (var + eps) ** 0.5
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(channels)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(channels)
    else:
        mu = running_mean.reshape(view)
        xhat = (x - mu) * Tensor(1.0 / np.sqrt(running_var.reshape(view) + eps))
    return xhat * reshape(as_tensor(gamma), view) + reshape(as_tensor(beta), view)


def log_softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    shifted = logits - Tensor(logits.data.max(axis=-1, keepdims=True))
    return shifted - log(exp(shifted).sum(-1, keepdims=True))


def softmax(logits) -> Tensor:
    return exp(log_softmax(logits))


def softmax_cross_entropy(logits, labels) -> tuple:
    """Mean cross-entropy and the (constant) class probabilities.

    ``logits`` is ``(D,)`` with an integer label or ``(B, D)`` with ``B`` labels.
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    if single:
        logits = reshape(logits, (1, -1))
    labels = np.atleast_1d(np.asarray(labels))
    d = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"{labels.shape[0]} labels for {logits.shape[0]} rows of logits")
    if np.any(labels < 0) or np.any(labels >= d):
        raise IndexError(f"label out of range for {d} classes")
    logp = log_softmax(logits)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels.astype(np.int64)] = 1.0
    loss = -(logp * Tensor(onehot)).sum() * (1.0 / len(labels))
    with no_grad():
        probs = np.exp(logp.data)
    return loss, probs[0] if single else probs
