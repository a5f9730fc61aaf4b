"""Closed-form expected squared input-output derivatives at initialization.

All predictors return the field ``(1/Z) Σ_j E[(∂h_j/∂x_i)²]`` over input entries
``i`` (layout ``(channels, *spatial)``), averaged over the ``Z`` output units, the
same quantity :func:`pathscape.verify.mc_importance_over_inits` estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from pathscape import lattice
from pathscape.archspec import BatchNorm, Conv, Dense, Flatten, NetworkSpec, ReLU, Residual, init_variances, output_shape, weight_layers


class WrongRegimeError(ValueError):
    """The network contains layers the chosen predictor does not model."""


@dataclass
class TheoryPrediction:
    field: np.ndarray
    assumptions: dict = field(default_factory=dict)
    error_order: str | None = None

    def center(self) -> float:
        idx = tuple(n // 2 for n in self.field.shape)
        return float(self.field[idx])


def _layers(layers) -> list:
    out = []
    for layer in layers:
        out.append(layer)
        if isinstance(layer, Residual):
            out.extend(_layers(layer.inner))
    return out


def _variance_map(spec: NetworkSpec, variances) -> dict:
    layers = weight_layers(spec)
    values = init_variances(spec) if variances is None else [float(v) for v in variances]
    if len(values) != len(layers):
        raise ValueError(f"{len(values)} variances for {len(layers)} weight layers")
    return {wl.path: v for wl, v in zip(layers, values)}


def _averaged(spec: NetworkSpec, conv_weight, relu_weight=None) -> np.ndarray:
    top = output_shape(spec)[-1]
    ones = np.ones((1, top.channels, *top.extent))
    return lattice.descend(spec, ones, conv_weight, relu_weight)[0] / top.size


def predict_linear(spec: NetworkSpec, variances: Sequence[float] | None = None) -> TheoryPrediction:
    """Sum over paths of the product of weight variances along the path, averaged over outputs.

    Exact for zero-mean independent weights in purely linear specs. ``variances``
    lists ``S_l`` per weight layer in :func:`~pathscape.archspec.weight_layers`
    order; by default they come from the init scheme.
    """
    bad = [type(layer).__name__ for layer in _layers(spec.layers) if isinstance(layer, (ReLU, BatchNorm))]
    if bad:
        raise WrongRegimeError(f"predict_linear models linear stacks only; found {sorted(set(bad))} "
                               "(use predict_relu or predict_batchnorm)")
    smap = _variance_map(spec, variances)
    values = _averaged(spec, lambda path, step: smap[path])
    return TheoryPrediction(values, {"regime": "linear", "variances": list(smap.values()), "exact": True})


def predict_relu(spec: NetworkSpec, variances: Sequence[float] | None = None) -> TheoryPrediction:
    """Linear prediction with every path attenuated by ½ per ReLU it crosses.

    Treats each ReLU gradient mask as independent of the weights downstream of it.
    """
    if any(isinstance(layer, BatchNorm) for layer in _layers(spec.layers)):
        raise WrongRegimeError("predict_relu does not model BatchNorm; use predict_batchnorm")
    smap = _variance_map(spec, variances)
    values = _averaged(spec, lambda path, step: smap[path], lambda path: 0.5)
    relus = sum(isinstance(layer, ReLU) for layer in _layers(spec.layers))
    return TheoryPrediction(values, {"regime": "relu", "variances": list(smap.values()), "relu_layers": relus,
                                     "mask_independence": True})


def relu_output_variance(input_variance: float) -> float:
    """Variance of ReLU(a) for a ~ N(0, S): S·(π − 1)/(2π)."""
    if not input_variance > 0:
        raise ValueError(f"input variance must be positive, got {input_variance}")
    return input_variance * (math.pi - 1.0) / (2.0 * math.pi)


def conv_output_variance(weights: np.ndarray, input_variance: float, out_channel: int | None = None):
    """Input variance times the sum of squared weights feeding an output channel.

    ``weights`` has layout ``(C_out, C_in, *K)``; without ``out_channel`` the value is
    returned for every output channel.
    """
    weights = np.asarray(weights, dtype=np.float64)
    per_channel = input_variance * (weights.reshape(weights.shape[0], -1) ** 2).sum(axis=1)
    return per_channel if out_channel is None else float(per_channel[out_channel])


def bn_sample_sizes(spec: NetworkSpec, batch: int) -> list:
    """Values per channel seen by each BatchNorm layer for a given batch size."""
    sizes, shapes = [], output_shape(spec)
    for layer, shape in zip(spec.layers, shapes[1:]):
        if isinstance(layer, BatchNorm):
            sizes.append(batch * math.prod(shape.extent))
    return sizes


def _per_layer(value, count: int, name: str) -> list:
    if value is None:
        raise ValueError(f"{name} is required")
    if np.ndim(value) == 0:
        return [float(value)] * count
    value = [float(v) for v in value]
    if len(value) != count:
        raise ValueError(f"{name} lists {len(value)} values for {count} BatchNorm layers")
    return value


def predict_batchnorm(spec: NetworkSpec, gamma_second_moments, input_variance: float,
                      sample_sizes: Sequence[int] | None) -> TheoryPrediction:
    """Train-mode prediction for sequential conv + BatchNorm (+ ReLU) stacks.

    A convolution followed by BatchNorm contributes, per hop, the factor
    ``(N−1)/N · E[γ²] / (V[h] · fan_in)``: the weight variance cancels between the
    derivative and the normalizing standard deviation. The activation variance
    ``V[h]`` is tracked from ``input_variance`` (BatchNorm resets it to ``E[γ²]``,
    ReLU maps it through :func:`relu_output_variance`). A weight layer without a
    following BatchNorm keeps its plain weight-variance factor. The result is
    accurate up to ``O(Σ 1/N)``.
    """
    layers = list(spec.layers)
    if any(isinstance(layer, Residual) for layer in layers):
        raise WrongRegimeError("predict_batchnorm models sequential stacks only")
    n_bn = sum(isinstance(layer, BatchNorm) for layer in layers)
    gammas = _per_layer(gamma_second_moments, n_bn, "gamma_second_moments")
    sizes = [int(n) for n in _per_layer(sample_sizes, n_bn, "sample_sizes")]
    if any(n < 2 for n in sizes):
        raise ValueError("BatchNorm sample sizes must be at least 2 (N = 1 has degenerate variance)")
    if not input_variance > 0:
        raise ValueError("input variance must be positive")
    smap = _variance_map(spec, None)
    fan = {wl.path: wl.fan_in for wl in weight_layers(spec)}
    factors, v, bn_index = {}, float(input_variance), 0
    for idx, layer in enumerate(layers):
        path = str(idx)
        if isinstance(layer, (Conv, Dense)):
            following = layers[idx + 1] if idx + 1 < len(layers) else None
            if isinstance(following, BatchNorm):
                n, g2 = sizes[bn_index], gammas[bn_index]
                factors[path] = (n - 1) / n * g2 / (v * fan[path])
            else:
                factors[path] = smap[path]
                v = v * fan[path] * smap[path]
        elif isinstance(layer, BatchNorm):
            if idx == 0 or not isinstance(layers[idx - 1], (Conv, Dense)):
                raise WrongRegimeError(f"layer {idx}: BatchNorm must directly follow a weight layer")
            v = gammas[bn_index]
            bn_index += 1
        elif isinstance(layer, ReLU):
            v = relu_output_variance(v)
        elif not isinstance(layer, Flatten):
            raise WrongRegimeError(f"layer {idx}: unsupported layer {type(layer).__name__}")
    values = _averaged(spec, lambda path, step: factors[path], lambda path: 0.5)
    order = sum(1.0 / n for n in sizes)
    return TheoryPrediction(
        values,
        {"regime": "batchnorm", "gamma_second_moments": gammas, "input_variance": float(input_variance),
         "sample_sizes": sizes, "relu_layers": sum(isinstance(layer, ReLU) for layer in layers),
         "mode": "train", "per_hop_factors": factors},
        error_order=f"O(sum 1/N) = {order:.3g}",
    )
