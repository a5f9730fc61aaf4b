"""Networks instantiated from a :class:`~pathscape.archspec.NetworkSpec`."""

from __future__ import annotations

import contextlib
import math

import numpy as np

from pathscape.archspec import (
    BatchNorm, Conv, Dense, Flatten, NetworkSpec, ReLU, Residual, Shape, init_variances,
    needs_projection, output_shape, weight_layers,
)
from pathscape.engine import functional as F
from pathscape.engine.tensor import Tensor, as_tensor, reshape

ROLES = ("weight", "bias", "gamma", "beta")


class Parameter(Tensor):
    """A trainable leaf tensor tagged with its layer path and role."""

    __slots__ = ("name", "layer", "role")

    def __init__(self, data, name: str, layer: str, role: str):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        if role not in ROLES:
            raise ValueError(f"unknown parameter role {role!r}")
        self.name = name
        self.layer = layer
        self.role = role

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape})"


class Network:
    """Parameters, BatchNorm buffers and a train/eval mode flag for one spec.

    ``forward`` maps a batch ``(B, C, *S)`` to ``(B, C_L, *S_L)``. Train mode uses
    batch statistics in BatchNorm layers; eval mode uses the running buffers.
    """

    def __init__(self, spec: NetworkSpec, eps: float = F.DEFAULT_EPS, momentum: float = F.DEFAULT_MOMENTUM):
        self.spec = spec
        self.eps = eps
        self.momentum = momentum
        self.training = True
        self.params: dict = {}
        self.buffers: dict = {}
        for wl in weight_layers(spec):
            shape = (wl.c_out, wl.c_in) + tuple(wl.kernel)
            self._add(f"{wl.path}.weight", np.zeros(shape), wl.path, "weight")
            if wl.bias:
                self._add(f"{wl.path}.bias", np.zeros(wl.c_out), wl.path, "bias")
        self._visit_bn(spec.layers, "")

    def _add(self, name, value, layer, role):
        self.params[name] = Parameter(value, name, layer, role)

    def _visit_bn(self, layers, prefix):
        for idx, layer in enumerate(layers):
            path = f"{prefix}{idx}"
            if isinstance(layer, BatchNorm):
                self._add(f"{path}.gamma", np.ones(layer.channels), path, "gamma")
                self._add(f"{path}.beta", np.zeros(layer.channels), path, "beta")
                self.buffers[f"{path}.running_mean"] = np.zeros(layer.channels)
                self.buffers[f"{path}.running_var"] = np.ones(layer.channels)
            elif isinstance(layer, Residual):
                self._visit_bn(layer.inner, f"{path}.inner.")

    # --- modes -----------------------------------------------------------
    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    @contextlib.contextmanager
    def mode(self, training: bool):
        prev = self.training
        self.training = training
        try:
            yield self
        finally:
            self.training = prev

    # --- parameters -------------------------------------------------------
    def parameters(self) -> list:
        return list(self.params.values())

    def weights(self) -> list:
        return [self.params[f"{wl.path}.weight"] for wl in weight_layers(self.spec)]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_arrays(self) -> dict:
        """Every parameter and buffer as a plain array, in a fixed order."""
        out = {name: p.data for name, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_arrays(self, arrays: dict) -> None:
        for name, value in arrays.items():
            if name in self.params:
                target = self.params[name].data
            elif name in self.buffers:
                target = self.buffers[name]
            else:
                raise KeyError(f"unknown state entry {name!r}")
            if target.shape != np.shape(value):
                raise ValueError(f"{name}: expected shape {target.shape}, got {np.shape(value)}")
            target[...] = value

    def copy(self) -> "Network":
        twin = Network(self.spec, self.eps, self.momentum)
        twin.load_arrays(self.state_arrays())
        twin.training = self.training
        return twin

    # --- forward ----------------------------------------------------------
    def forward(self, x, relu_masks: list | None = None) -> Tensor:
        """Run the network; ReLU masks are appended to ``relu_masks`` when given."""
        x = as_tensor(x)
        expected = (self.spec.input_channels,) + tuple(self.spec.input_extent)
        if tuple(x.shape[1:]) != expected:
            raise ValueError(f"input shape {x.shape[1:]} does not match spec {expected}")
        return self._run(self.spec.layers, x, "", relu_masks)

    __call__ = forward

    def logits(self, x) -> Tensor:
        out = self.forward(x)
        return reshape(out, (out.shape[0], -1))

    def _run(self, layers, h: Tensor, prefix: str, masks) -> Tensor:
        for idx, layer in enumerate(layers):
            path = f"{prefix}{idx}"
            if isinstance(layer, Conv):
                h = F.conv(h, self.params[f"{path}.weight"], self.params.get(f"{path}.bias"),
                           layer.stride, layer.dilation, layer.pad)
            elif isinstance(layer, Dense):
                h = F.conv(h, self.params[f"{path}.weight"], self.params.get(f"{path}.bias"))
            elif isinstance(layer, ReLU):
                if masks is not None:
                    masks.append(F.relu_mask(h))
                h = F.relu(h)
            elif isinstance(layer, BatchNorm):
                h = F.batchnorm(h, self.params[f"{path}.gamma"], self.params[f"{path}.beta"],
                                self.buffers[f"{path}.running_mean"], self.buffers[f"{path}.running_var"],
                                self.training, self.eps, self.momentum)
            elif isinstance(layer, Flatten):
                h = reshape(h, (h.shape[0], math.prod(h.shape[1:])) + (1,) * self.spec.rank)
            elif isinstance(layer, Residual):
                inner = self._run(layer.inner, h, f"{path}.inner.", masks)
                if needs_projection(layer, h.shape[1]):
                    skip = F.conv(h, self.params[f"{path}.proj.weight"], None, layer.proj_stride)
                else:
                    skip = h
                h = inner + skip
            else:
                raise TypeError(f"unsupported layer {layer!r}")
        return h

    def output_shape(self) -> Shape:
        return output_shape(self.spec)[-1]


def init(spec: NetworkSpec, seed: int, **kwargs) -> Network:
    """Zero-mean normal weights with the per-layer variances of the init scheme; zero biases, unit gamma.

    Weights are drawn layer by layer in :func:`~pathscape.archspec.weight_layers`
    order from one generator seeded with ``seed``.
    """
    net = Network(spec, **kwargs)
    rng = np.random.default_rng(seed)
    for wl, var in zip(weight_layers(spec), init_variances(spec)):
        w = net.params[f"{wl.path}.weight"]
        w.data[...] = math.sqrt(var) * rng.standard_normal(w.shape)
    return net
