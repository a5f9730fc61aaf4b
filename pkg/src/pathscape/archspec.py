"""Declarative network descriptions: types, validation, JSON parsing and shape propagation.

Architecture documents are JSON objects::

    {"rank": 1, "input": [5, 1], "init": "he",
     "layers": [{"type": "conv", "k": 3, "c_in": 1, "c_out": 1},
                {"type": "conv", "k": 3, "c_in": 1, "c_out": 1}]}

``input`` lists the spatial extents followed by the channel count. Layer types are
``conv``, ``relu``, ``batchnorm``, ``dense``, ``flatten`` and ``residual``. All
convolutions are unpadded unless the ``pad`` extension key is given.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence, Union


class SpecError(ValueError):
    """Base class for architecture document problems."""


class SpecParseError(SpecError):
    """Malformed document: bad JSON, wrong types, unknown or missing keys."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class SpecValidationError(SpecError):
    """Well-formed document that violates an architecture invariant."""

    def __init__(self, layer: str, message: str):
        self.layer = layer
        super().__init__(f"layer {layer}: {message}")


class ShapeError(SpecValidationError):
    """Shape propagation drove a spatial extent below one."""


@dataclass(frozen=True)
class Conv:
    k: int
    c_in: int
    c_out: int
    stride: int = 1
    dilation: int = 1
    bias: bool = True
    pad: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class BatchNorm:
    channels: int


@dataclass(frozen=True)
class Dense:
    """Fully connected layer, treated as a convolution covering the whole extent."""

    c_in: int
    c_out: int
    bias: bool = True


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Residual:
    """``inner(x) + skip(x)``; the skip is the identity unless a projection is needed.

    A projection (1x1 convolution with stride ``proj_stride``) is inserted when
    ``proj_stride > 1`` or the inner block changes the channel count.
    """

    inner: tuple
    proj_stride: int = 1


LayerSpec = Union[Conv, ReLU, BatchNorm, Dense, Flatten, Residual]

INIT_SCHEMES = ("he", "glorot")


@dataclass(frozen=True)
class NetworkSpec:
    rank: int
    input_extent: tuple
    input_channels: int
    layers: tuple
    init: Union[str, tuple] = "he"

    def __post_init__(self):
        validate(self)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def custom_variances(self) -> tuple | None:
        return self.init if isinstance(self.init, tuple) else None


@dataclass(frozen=True)
class Shape:
    channels: int
    extent: tuple

    @property
    def size(self) -> int:
        return self.channels * math.prod(self.extent)


@dataclass(frozen=True)
class WeightLayer:
    """A weight-bearing layer located by its path in the layer tree."""

    path: str
    layer: Any
    kernel: tuple
    c_in: int
    c_out: int
    stride: int
    dilation: int
    pad: int
    bias: bool
    in_shape: Shape = field(compare=False)
    out_shape: Shape = field(compare=False)

    @property
    def fan_in(self) -> int:
        return math.prod(self.kernel) * self.c_in

    @property
    def fan_out(self) -> int:
        return math.prod(self.kernel) * self.c_out


def conv_extent(n: int, k: int, stride: int = 1, dilation: int = 1, pad: int = 0) -> int:
    """Number of valid kernel placements along one axis (may be < 1)."""
    span = dilation * (k - 1) + 1
    if n + 2 * pad < span:
        return 0
    return (n + 2 * pad - span) // stride + 1


def needs_projection(block: Residual, in_channels: int) -> bool:
    return block.proj_stride > 1 or _block_out_channels(block.inner, in_channels) != in_channels


def _block_out_channels(layers: Sequence, channels: int) -> int:
    for layer in layers:
        if isinstance(layer, (Conv, Dense)):
            channels = layer.c_out
        elif isinstance(layer, Residual):
            channels = _block_out_channels(layer.inner, channels)
    return channels


def _layer_out(layer, shape: Shape, rank: int, path: str) -> Shape:
    if isinstance(layer, Conv):
        for name in ("k", "stride", "dilation"):
            if getattr(layer, name) < 1:
                raise SpecValidationError(path, f"{name} must be >= 1")
        if layer.pad < 0:
            raise SpecValidationError(path, "pad must be >= 0")
        if layer.c_in < 1 or layer.c_out < 1:
            raise SpecValidationError(path, "channel counts must be >= 1")
        if layer.c_in != shape.channels:
            raise SpecValidationError(
                path, f"c_in={layer.c_in} does not match incoming channels {shape.channels}"
            )
        ext = tuple(conv_extent(n, layer.k, layer.stride, layer.dilation, layer.pad) for n in shape.extent)
        if min(ext) < 1:
            raise ShapeError(path, f"kernel {layer.k} does not fit extent {shape.extent}")
        return Shape(layer.c_out, ext)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, BatchNorm):
        if layer.channels != shape.channels:
            raise SpecValidationError(
                path, f"channels={layer.channels} does not match incoming channels {shape.channels}"
            )
        return shape
    if isinstance(layer, Dense):
        if layer.c_in < 1 or layer.c_out < 1:
            raise SpecValidationError(path, "channel counts must be >= 1")
        if layer.c_in != shape.channels:
            raise SpecValidationError(
                path, f"c_in={layer.c_in} does not match incoming channels {shape.channels}"
            )
        return Shape(layer.c_out, (1,) * rank)
    if isinstance(layer, Flatten):
        return Shape(shape.size, (1,) * rank)
    if isinstance(layer, Residual):
        if layer.proj_stride < 1:
            raise SpecValidationError(path, "proj_stride must be >= 1")
        if not layer.inner:
            raise SpecValidationError(path, "residual block needs at least one inner layer")
        inner = shape
        for idx, sub in enumerate(layer.inner):
            inner = _layer_out(sub, inner, rank, f"{path}.inner.{idx}")
        if needs_projection(layer, shape.channels):
            skip = Shape(inner.channels, tuple(conv_extent(n, 1, layer.proj_stride) for n in shape.extent))
        else:
            skip = shape
        if inner != skip:
            raise SpecValidationError(
                path, f"inner block output {inner.extent}x{inner.channels} does not match "
                f"skip output {skip.extent}x{skip.channels}"
            )
        return inner
    raise SpecValidationError(path, f"unknown layer variant {type(layer).__name__}")


def validate(spec: NetworkSpec) -> None:
    if spec.rank not in (1, 2):
        raise SpecValidationError("input", f"rank must be 1 or 2, got {spec.rank}")
    if len(spec.input_extent) != spec.rank:
        raise SpecValidationError("input", f"expected {spec.rank} spatial extents")
    if min(spec.input_extent) < 1 or spec.input_channels < 1:
        raise SpecValidationError("input", "extents and channels must be >= 1")
    if not isinstance(spec.layers, tuple):
        raise SpecValidationError("layers", "layers must be a tuple")
    output_shape(spec)
    if isinstance(spec.init, tuple):
        n = len(weight_layers(spec))
        if len(spec.init) != n:
            raise SpecValidationError("init", f"custom init lists {len(spec.init)} variances for {n} weight layers")
        if any(s < 0 for s in spec.init):
            raise SpecValidationError("init", "variances must be >= 0")
    elif spec.init not in INIT_SCHEMES:
        raise SpecValidationError("init", f"unknown init scheme {spec.init!r}")


def output_shape(spec: NetworkSpec) -> list:
    """Shapes of H^(0) .. H^(L): the input followed by every top-level layer output."""
    shape = Shape(spec.input_channels, tuple(spec.input_extent))
    table = [shape]
    for idx, layer in enumerate(spec.layers):
        shape = _layer_out(layer, shape, spec.rank, str(idx))
        table.append(shape)
    return table


def weight_layers(spec: NetworkSpec) -> list:
    """Weight-bearing layers in depth-first order (inner layers before projections)."""
    out = []

    def visit(layers, shape, prefix):
        for idx, layer in enumerate(layers):
            path = f"{prefix}{idx}"
            nxt = _layer_out(layer, shape, spec.rank, path)
            if isinstance(layer, Conv):
                out.append(WeightLayer(path, layer, (layer.k,) * spec.rank, layer.c_in, layer.c_out,
                                       layer.stride, layer.dilation, layer.pad, layer.bias, shape, nxt))
            elif isinstance(layer, Dense):
                out.append(WeightLayer(path, layer, tuple(shape.extent), layer.c_in, layer.c_out,
                                       1, 1, 0, layer.bias, shape, nxt))
            elif isinstance(layer, Residual):
                visit(layer.inner, shape, f"{path}.inner.")
                if needs_projection(layer, shape.channels):
                    out.append(WeightLayer(f"{path}.proj", layer, (1,) * spec.rank, shape.channels,
                                           nxt.channels, layer.proj_stride, 1, 0, False, shape, nxt))
            shape = nxt

    visit(spec.layers, Shape(spec.input_channels, tuple(spec.input_extent)), "")
    return out


def init_variances(spec: NetworkSpec) -> list:
    """Per weight layer variance S_l implied by the init scheme."""
    layers = weight_layers(spec)
    if isinstance(spec.init, tuple):
        return [float(s) for s in spec.init]
    if spec.init == "he":
        return [2.0 / wl.fan_in for wl in layers]
    return [2.0 / (wl.fan_in + wl.fan_out) for wl in layers]


def with_init(spec: NetworkSpec, init) -> NetworkSpec:
    if isinstance(init, (list, tuple)):
        init = tuple(float(s) for s in init)
    return NetworkSpec(spec.rank, spec.input_extent, spec.input_channels, spec.layers, init)


# --- JSON -----------------------------------------------------------------

_KEYS = {
    "conv": ({"k", "c_in", "c_out"}, {"stride", "dilation", "bias", "pad"}),
    "relu": (set(), set()),
    "batchnorm": (set(), {"channels"}),
    "dense": ({"c_in", "c_out"}, {"bias"}),
    "flatten": (set(), set()),
    "residual": ({"inner"}, {"proj_stride"}),
}


def _int(obj: dict, key: str, path: str, default=None) -> int:
    if key not in obj:
        if default is None:
            raise SpecParseError(f"{path}.{key}", "missing required key")
        return default
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise SpecParseError(f"{path}.{key}", f"expected integer, got {value!r}")
    return value


def _parse_layers(items: Any, path: str, channels: int | None) -> tuple:
    if not isinstance(items, list):
        raise SpecParseError(path, "expected a list of layers")
    layers = []
    for idx, obj in enumerate(items):
        lpath = f"{path}[{idx}]"
        if not isinstance(obj, dict):
            raise SpecParseError(lpath, "expected an object")
        kind = obj.get("type")
        if kind not in _KEYS:
            raise SpecParseError(f"{lpath}.type", f"unknown layer type {kind!r}")
        required, optional = _KEYS[kind]
        for key in obj:
            if key != "type" and key not in required | optional:
                raise SpecParseError(f"{lpath}.{key}", f"unknown key for {kind} layer")
        if kind == "conv":
            bias = obj.get("bias", True)
            if not isinstance(bias, bool):
                raise SpecParseError(f"{lpath}.bias", "expected boolean")
            layer = Conv(_int(obj, "k", lpath), _int(obj, "c_in", lpath), _int(obj, "c_out", lpath),
                         _int(obj, "stride", lpath, 1), _int(obj, "dilation", lpath, 1), bias,
                         _int(obj, "pad", lpath, 0))
            channels = layer.c_out
        elif kind == "relu":
            layer = ReLU()
        elif kind == "batchnorm":
            if "channels" in obj or channels is None:
                layer = BatchNorm(_int(obj, "channels", lpath))
            else:
                layer = BatchNorm(channels)
        elif kind == "dense":
            bias = obj.get("bias", True)
            if not isinstance(bias, bool):
                raise SpecParseError(f"{lpath}.bias", "expected boolean")
            layer = Dense(_int(obj, "c_in", lpath), _int(obj, "c_out", lpath), bias)
            channels = layer.c_out
        elif kind == "flatten":
            layer = Flatten()
            channels = None
        else:
            inner = _parse_layers(obj["inner"], f"{lpath}.inner", channels)
            layer = Residual(inner, _int(obj, "proj_stride", lpath, 1))
            channels = _block_out_channels(inner, channels) if channels is not None else None
        layers.append(layer)
    return tuple(layers)


def spec_from_dict(doc: Any) -> NetworkSpec:
    if not isinstance(doc, dict):
        raise SpecParseError("$", "document must be a JSON object")
    for key in doc:
        if key not in ("rank", "input", "init", "layers"):
            raise SpecParseError(f"$.{key}", "unknown key")
    rank = _int(doc, "rank", "$")
    inp = doc.get("input")
    if not isinstance(inp, list) or len(inp) < 2 or any(isinstance(v, bool) or not isinstance(v, int) for v in inp):
        raise SpecParseError("$.input", "expected [extent(, extent), channels] of integers")
    init = doc.get("init", "he")
    if isinstance(init, dict):
        if set(init) != {"custom"} or not isinstance(init["custom"], list):
            raise SpecParseError("$.init", 'expected "he", "glorot" or {"custom": [...]}')
        values = init["custom"]
        if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in values):
            raise SpecParseError("$.init.custom", "expected a list of numbers")
        init = tuple(float(v) for v in values)
    elif not isinstance(init, str):
        raise SpecParseError("$.init", 'expected "he", "glorot" or {"custom": [...]}')
    if "layers" not in doc:
        raise SpecParseError("$.layers", "missing required key")
    layers = _parse_layers(doc["layers"], "$.layers", inp[-1])
    return NetworkSpec(rank, tuple(inp[:-1]), inp[-1], layers, init)


def parse_spec(text: str) -> NetworkSpec:
    """Parse and validate an architecture document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecParseError(f"line {exc.lineno} column {exc.colno}", exc.msg) from None
    return spec_from_dict(doc)


def load_spec(path) -> NetworkSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_spec(fh.read())


def _layer_to_dict(layer) -> dict:
    if isinstance(layer, Conv):
        return {"type": "conv", "k": layer.k, "c_in": layer.c_in, "c_out": layer.c_out,
                "stride": layer.stride, "dilation": layer.dilation, "bias": layer.bias, "pad": layer.pad}
    if isinstance(layer, ReLU):
        return {"type": "relu"}
    if isinstance(layer, BatchNorm):
        return {"type": "batchnorm", "channels": layer.channels}
    if isinstance(layer, Dense):
        return {"type": "dense", "c_in": layer.c_in, "c_out": layer.c_out, "bias": layer.bias}
    if isinstance(layer, Flatten):
        return {"type": "flatten"}
    return {"type": "residual", "inner": [_layer_to_dict(sub) for sub in layer.inner],
            "proj_stride": layer.proj_stride}


def spec_to_dict(spec: NetworkSpec) -> dict:
    init = {"custom": list(spec.init)} if isinstance(spec.init, tuple) else spec.init
    return {
        "rank": spec.rank,
        "input": [*spec.input_extent, spec.input_channels],
        "init": init,
        "layers": [_layer_to_dict(layer) for layer in spec.layers],
    }


def serialize_spec(spec: NetworkSpec) -> str:
    """Canonical document: every optional key spelled out, stable key order."""
    return json.dumps(spec_to_dict(spec), indent=2) + "\n"
