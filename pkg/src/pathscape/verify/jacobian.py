"""Trial-vectorized forward-mode input Jacobians, written directly in numpy.

This is deliberately independent of :mod:`pathscape.engine`: it serves as the
oracle the closed-form predictors and the autodiff engine are checked against.

Arrays carry a leading trial axis ``T``. Primal activations have shape
``(T, B, C, *S)``; tangents have shape ``(T, D, B, C, *S)`` where ``D`` indexes the
input entries of sample 0 that are being differentiated.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from pathscape.archspec import (
    BatchNorm, Conv, Dense, Flatten, NetworkSpec, ReLU, Residual, init_variances, needs_projection, weight_layers,
)

_SPATIAL = "xyz"


def draw_weights(spec: NetworkSpec, trials: int, rng: np.random.Generator, scale: float = 1.0) -> dict:
    """Independent zero-mean normal weights per trial, keyed by layer path."""
    out = {}
    for wl, var in zip(weight_layers(spec), init_variances(spec)):
        shape = (trials, wl.c_out, wl.c_in) + tuple(wl.kernel)
        out[wl.path] = scale * math.sqrt(var) * rng.standard_normal(shape)
    return out


def _conv(x: np.ndarray, w: np.ndarray, stride: int, dilation: int, pad: int, lead: int) -> np.ndarray:
    """Valid (optionally zero-padded) cross-correlation with per-trial kernels.

    ``x`` is ``(T, *mid, C_in, *S)`` with ``lead`` middle axes; ``w`` is
    ``(T, C_out, C_in, *K)``.
    """
    rank = w.ndim - 3
    kernel = w.shape[3:]
    if pad:
        x = np.pad(x, [(0, 0)] * (x.ndim - rank) + [(pad, pad)] * rank)
    extent = x.shape[x.ndim - rank:]
    out_extent = tuple((n - dilation * (k - 1) - 1) // stride + 1 for n, k in zip(extent, kernel))
    mid = "abcd"[:lead]
    sp = _SPATIAL[:rank]
    expr = f"t{mid}i{sp},toi->t{mid}o{sp}"
    out = None
    for offset in itertools.product(*(range(k) for k in kernel)):
        window = tuple(slice(o * dilation, o * dilation + stride * (n - 1) + 1, stride) for o, n in zip(offset, out_extent))
        piece = np.einsum(expr, x[(Ellipsis,) + window], w[(Ellipsis,) + tuple(offset)])
        out = piece if out is None else out + piece
    return out


class ForwardJacobian:
    """Propagates primal values and tangents through a spec with given weights."""

    def __init__(self, spec: NetworkSpec, weights: dict, training: bool = True, eps: float = 0.0):
        self.spec = spec
        self.weights = weights
        self.training = training
        self.eps = eps

    def run(self, x: np.ndarray, dx: np.ndarray) -> tuple:
        return self._layers(self.spec.layers, x, dx, "")

    def _layers(self, layers, x, dx, prefix):
        rank = self.spec.rank
        for idx, layer in enumerate(layers):
            path = f"{prefix}{idx}"
            if isinstance(layer, Conv):
                w = self.weights[f"{path}"]
                x = _conv(x, w, layer.stride, layer.dilation, layer.pad, 1)
                dx = _conv(dx, w, layer.stride, layer.dilation, layer.pad, 2)
            elif isinstance(layer, Dense):
                w = self.weights[f"{path}"]
                x = _conv(x, w, 1, 1, 0, 1)
                dx = _conv(dx, w, 1, 1, 0, 2)
            elif isinstance(layer, ReLU):
                mask = x > 0
                x = x * mask
                dx = dx * mask[:, None]
            elif isinstance(layer, BatchNorm):
                x, dx = self._batchnorm(x, dx)
            elif isinstance(layer, Flatten):
                x = x.reshape(x.shape[:2] + (-1,) + (1,) * rank)
                dx = dx.reshape(dx.shape[:3] + (-1,) + (1,) * rank)
            elif isinstance(layer, Residual):
                ix, idx_ = self._layers(layer.inner, x, dx, f"{path}.inner.")
                if needs_projection(layer, x.shape[2]):
                    w = self.weights[f"{path}.proj"]
                    sx = _conv(x, w, layer.proj_stride, 1, 0, 1)
                    sdx = _conv(dx, w, layer.proj_stride, 1, 0, 2)
                else:
                    sx, sdx = x, dx
                x, dx = ix + sx, idx_ + sdx
            else:
                raise TypeError(f"unsupported layer {layer!r}")
        return x, dx

    def _batchnorm(self, x, dx):
        """Unit gamma, zero beta, as at initialization."""
        if not self.training:
            scale = 1.0 / math.sqrt(1.0 + self.eps)
            return x * scale, dx * scale
        axes = (1,) + tuple(range(3, x.ndim))
        mu = x.mean(axis=axes, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        sigma = np.sqrt(var + self.eps)
        t_axes = tuple(a + 1 for a in axes)
        dmu = dx.mean(axis=t_axes, keepdims=True)
        dcentered = dx - dmu
        dvar = 2.0 * (centered[:, None] * dcentered).mean(axis=t_axes, keepdims=True)
        xhat = centered / sigma
        dxhat = dcentered / sigma[:, None] - centered[:, None] * dvar / (2.0 * sigma[:, None] ** 3)
        return xhat, dxhat


def sample0_squared_jacobian(spec: NetworkSpec, weights: dict, x: np.ndarray, training: bool = True,
                             eps: float = 0.0) -> np.ndarray:
    """Per-trial ``(1/Z) Σ_j (∂h_j/∂x_i)²`` for sample 0 of each trial's batch.

    ``x`` is ``(T, B, C, *S)``; the result is ``(T, C, *S)``.
    """
    trials, batch = x.shape[:2]
    in_shape = x.shape[2:]
    d = math.prod(in_shape)
    dx = np.zeros((trials, d, batch) + in_shape)
    dx.reshape(trials, d, batch, d)[:, np.arange(d), 0, np.arange(d)] = 1.0
    _, dy = ForwardJacobian(spec, weights, training, eps).run(x, dx)
    out = dy[:, :, 0].reshape(trials, d, -1)
    return (out * out).mean(axis=2).reshape((trials,) + in_shape)
