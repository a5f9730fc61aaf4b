"""Exact output-to-input path counting in the lattice of a convolutional network.

Coordinates are ``(channel, *spatial)`` tuples. A path from an output unit to an
input unit picks, at every crossed weight layer, one kernel offset and one input
channel; ReLU and BatchNorm layers are transparent. Residual blocks add a ``skip``
alternative. Counts are Python integers so deep lattices never overflow.

Commands in a :data:`CommandVector` are ordered from the output layer downwards.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from pathscape import kernels
from pathscape.archspec import (
    BatchNorm,
    Conv,
    Dense,
    Flatten,
    NetworkSpec,
    ReLU,
    Residual,
    Shape,
    _layer_out,
    needs_projection,
    output_shape,
)

SKIP = "skip"
DEFAULT_ENUMERATION_LIMIT = 10**7


class InvalidCommandError(ValueError):
    pass


class CommandSpaceTooLarge(RuntimeError):
    def __init__(self, size: int, limit: int):
        self.size = size
        self.limit = limit
        super().__init__(f"command space has {size:.3e} vectors, limit is {limit:.3e}")


@dataclass(frozen=True)
class PathCountTable:
    """``counts[j + i]`` is #p(j -> i) for output coordinate j and input coordinate i."""

    counts: np.ndarray
    out_shape: Shape
    in_shape: Shape

    def row(self, out_index: Sequence[int]) -> np.ndarray:
        return self.counts[tuple(out_index)]


@dataclass(frozen=True)
class PathField:
    """Mean path count from all output units to each input unit, kept as exact rationals."""

    totals: np.ndarray  # object array of ints, summed over output units
    z: int
    shape: Shape

    @property
    def values(self) -> np.ndarray:
        out = np.empty(self.totals.shape, dtype=object)
        for idx, total in np.ndenumerate(self.totals):
            out[idx] = Fraction(int(total), self.z)
        return out

    def as_float(self) -> np.ndarray:
        return np.array([float(Fraction(int(t), self.z)) for t in self.totals.ravel()]).reshape(self.totals.shape)


# --- per-layer geometry ------------------------------------------------------


@dataclass(frozen=True)
class _Step:
    """One weight-bearing hop: a convolution seen as (kernel, stride, dilation, pad)."""

    kernel: tuple
    stride: int
    dilation: int
    pad: int
    c_in: int
    c_out: int
    in_shape: Shape
    out_shape: Shape


def _conv_step(layer, in_shape: Shape, out_shape: Shape, rank: int) -> _Step:
    if isinstance(layer, Dense):
        return _Step(tuple(in_shape.extent), 1, 1, 0, layer.c_in, layer.c_out, in_shape, out_shape)
    return _Step((layer.k,) * rank, layer.stride, layer.dilation, layer.pad,
                 layer.c_in, layer.c_out, in_shape, out_shape)


def _proj_step(block: Residual, in_shape: Shape, out_shape: Shape, rank: int) -> _Step:
    return _Step((1,) * rank, block.proj_stride, 1, 0, in_shape.channels, out_shape.channels, in_shape, out_shape)


def _annotate(layers, shape: Shape, rank: int, prefix: str = "") -> list:
    """List of ``(layer, in_shape, out_shape, children)``; children annotate residual inners."""
    out = []
    for idx, layer in enumerate(layers):
        nxt = _layer_out(layer, shape, rank, f"{prefix}{idx}")
        children = _annotate(layer.inner, shape, rank, f"{prefix}{idx}.inner.") if isinstance(layer, Residual) else None
        out.append((layer, shape, nxt, children))
        shape = nxt
    return out


def _plan(spec: NetworkSpec) -> list:
    return _annotate(spec.layers, Shape(spec.input_channels, tuple(spec.input_extent)), spec.rank)


# --- route ------------------------------------------------------------------


def _apply_conv(step: _Step, coord: tuple, command) -> tuple | None:
    try:
        offset, c_in, c_out = command
    except (TypeError, ValueError):
        raise InvalidCommandError(f"expected (offset, c_in, c_out), got {command!r}") from None
    offset = (offset,) * len(step.kernel) if isinstance(offset, int) else tuple(offset)
    if len(offset) != len(step.kernel) or any(o < 0 or o >= k for o, k in zip(offset, step.kernel)):
        raise InvalidCommandError(f"kernel offset {offset} outside kernel {step.kernel}")
    if not (0 <= c_in < step.c_in and 0 <= c_out < step.c_out):
        raise InvalidCommandError(f"channels ({c_in}, {c_out}) outside ({step.c_in}, {step.c_out})")
    if coord[0] != c_out:
        return None
    pos = tuple(p * step.stride + o * step.dilation - step.pad for p, o in zip(coord[1:], offset))
    if any(q < 0 or q >= n for q, n in zip(pos, step.in_shape.extent)):
        return None
    return (c_in, *pos)


def _unflatten(coord: tuple, in_shape: Shape) -> tuple:
    area = math.prod(in_shape.extent)
    pos = np.unravel_index(coord[0] % area, in_shape.extent)
    return (coord[0] // area, *(int(p) for p in pos))


def route(spec: NetworkSpec, out_index: Sequence[int], commands: Sequence) -> tuple | None:
    """Follow a command vector from an output unit down to the input tensor.

    ``commands`` holds one entry per crossed weight layer, top layer first. A
    residual block is crossed either by its inner commands or by a single
    ``"skip"`` entry; for projected skips the entry is ``("skip", c_in, c_out)``.
    Returns the input coordinate, or ``None`` when the route leaves the tensor or
    a command's out-channel does not match the unit being visited.
    """
    plan = _plan(spec)
    coord = tuple(int(v) for v in out_index)
    top = output_shape(spec)[-1]
    if len(coord) != spec.rank + 1 or not (0 <= coord[0] < top.channels) or any(
        not 0 <= p < n for p, n in zip(coord[1:], top.extent)
    ):
        raise InvalidCommandError(f"output index {out_index} outside {top}")
    remaining = list(commands)
    coord = _route_layers(plan, coord, remaining, spec.rank)
    if remaining:
        raise InvalidCommandError(f"{len(remaining)} unused commands")
    return coord


def _route_layers(plan, coord, remaining: list, rank: int):
    for layer, in_shape, out_shape, children in reversed(plan):
        if coord is None:
            # keep consuming so the length check still applies
            _consume(layer, children, remaining, in_shape)
            continue
        if isinstance(layer, (Conv, Dense)):
            if not remaining:
                raise InvalidCommandError("command vector too short")
            coord = _apply_conv(_conv_step(layer, in_shape, out_shape, rank), coord, remaining.pop(0))
        elif isinstance(layer, Flatten):
            coord = _unflatten(coord, in_shape)
        elif isinstance(layer, Residual):
            if not remaining:
                raise InvalidCommandError("command vector too short")
            head = remaining[0]
            if head == SKIP or (isinstance(head, tuple) and head and head[0] == SKIP):
                remaining.pop(0)
                if needs_projection(layer, in_shape.channels):
                    if not (isinstance(head, tuple) and len(head) == 3):
                        raise InvalidCommandError("projected skip needs ('skip', c_in, c_out)")
                    coord = _apply_conv(_proj_step(layer, in_shape, out_shape, rank), coord, (0, head[1], head[2]))
                elif head != SKIP:
                    raise InvalidCommandError("identity skip takes a bare 'skip' command")
            else:
                coord = _route_layers(children, coord, remaining, rank)
        elif not isinstance(layer, (ReLU, BatchNorm)):
            raise InvalidCommandError(f"unsupported layer {layer!r}")
    return coord


def _consume(layer, children, remaining: list, in_shape: Shape) -> None:
    if isinstance(layer, (Conv, Dense)):
        if not remaining:
            raise InvalidCommandError("command vector too short")
        remaining.pop(0)
    elif isinstance(layer, Residual):
        if not remaining:
            raise InvalidCommandError("command vector too short")
        head = remaining[0]
        if head == SKIP or (isinstance(head, tuple) and head and head[0] == SKIP):
            remaining.pop(0)
        else:
            for sub, sub_in, _, sub_children in reversed(children):
                _consume(sub, sub_children, remaining, sub_in)


def command_vectors(spec: NetworkSpec):
    """Every command vector of the network (the full, unpruned command space)."""
    return _vectors(_plan(spec), spec.rank)


def _vectors(plan, rank: int):
    choices = []
    for layer, in_shape, out_shape, children in reversed(plan):
        if isinstance(layer, (Conv, Dense)):
            step = _conv_step(layer, in_shape, out_shape, rank)
            choices.append([[(off, ci, co)] for off in itertools.product(*(range(k) for k in step.kernel))
                            for ci in range(step.c_in) for co in range(step.c_out)])
        elif isinstance(layer, Residual):
            if needs_projection(layer, in_shape.channels):
                skips = [[(SKIP, ci, co)] for ci in range(in_shape.channels) for co in range(out_shape.channels)]
            else:
                skips = [[SKIP]]
            choices.append(skips + [list(v) for v in _vectors(children, rank)])
    for combo in itertools.product(*choices):
        yield [cmd for part in combo for cmd in part]


# --- brute-force enumeration ------------------------------------------------


def _chains(plan, rank: int) -> list:
    """Expand residual choices into plain layer chains (top layer first).

    Each chain is a list of stage rows for :func:`kernels.enumerate_chain`.
    """
    chains = [[]]
    for layer, in_shape, out_shape, children in reversed(plan):
        if isinstance(layer, (Conv, Dense)):
            stage = _stage_row(_conv_step(layer, in_shape, out_shape, rank))
            chains = [c + [stage] for c in chains]
        elif isinstance(layer, Flatten):
            row = [1] + [0] * 12
            row[9] = in_shape.channels
            row[11] = in_shape.extent[0]
            row[12] = in_shape.extent[1] if rank == 2 else 1
            chains = [c + [row] for c in chains]
        elif isinstance(layer, Residual):
            if needs_projection(layer, in_shape.channels):
                skip = [[_stage_row(_proj_step(layer, in_shape, out_shape, rank))]]
            else:
                skip = [[]]
            alts = skip + _chains(children, rank)
            chains = [c + alt for c in chains for alt in alts]
    return chains


def _stage_row(step: _Step) -> list:
    kern = tuple(step.kernel) + (1,) * (2 - len(step.kernel))
    ext = tuple(step.in_shape.extent) + (1,) * (2 - len(step.in_shape.extent))
    two_d = len(step.kernel) == 2
    return [0, kern[0], kern[1], step.stride, step.stride if two_d else 1,
            step.dilation, step.dilation if two_d else 1, step.pad, step.pad if two_d else 0,
            step.c_in, step.c_out, ext[0], ext[1]]


def _chain_size(chain) -> int:
    return math.prod(r[1] * r[2] * r[9] * r[10] for r in chain if r[0] == 0)


def command_space_size(spec: NetworkSpec) -> int:
    return sum(_chain_size(c) for c in _chains(_plan(spec), spec.rank))


def enumerate_routes(spec: NetworkSpec, out_index: Sequence[int], limit: int = DEFAULT_ENUMERATION_LIMIT) -> np.ndarray:
    """Count routes from one output unit to every input unit by exhaustive search.

    Returns an integer array of shape ``(C_0, *input_extent)``.
    """
    chains = _chains(_plan(spec), spec.rank)
    size = sum(_chain_size(c) for c in chains)
    if size > limit:
        raise CommandSpaceTooLarge(size, limit)
    extent = tuple(spec.input_extent) + (1,) * (2 - spec.rank)
    counts = np.zeros((spec.input_channels, *extent), dtype=np.int64)
    c, *pos = (int(v) for v in out_index)
    pos = pos + [0] * (2 - spec.rank)
    for chain in chains:
        stages = np.ascontiguousarray(chain, dtype=np.int64).reshape(-1, 13)
        kernels.enumerate_chain(stages, c, pos[0], pos[1], counts)
    return counts.reshape(spec.input_channels, *spec.input_extent)


# --- dynamic programming ----------------------------------------------------


def _descend_conv(v: np.ndarray, step: _Step, weight=1) -> np.ndarray:
    """Push per-unit path counts from a layer's output down to its input.

    ``v`` has shape ``(R, C_out, *S_out)``; the result ``(R, C_in, *S_in)``.
    Every input channel receives the sum over output channels (dense channel mixing).
    """
    rank = len(step.kernel)
    summed = v.sum(axis=1)
    spatial = np.zeros((v.shape[0], *step.in_shape.extent), dtype=v.dtype)
    for offset in itertools.product(*(range(k) for k in step.kernel)):
        src, dst = [slice(None)], [slice(None)]
        for axis in range(rank):
            n_out = step.out_shape.extent[axis]
            n_in = step.in_shape.extent[axis]
            start = offset[axis] * step.dilation - step.pad
            lo = 0
            while lo < n_out and start + lo * step.stride < 0:
                lo += 1
            hi = n_out
            while hi > lo and start + (hi - 1) * step.stride >= n_in:
                hi -= 1
            if hi <= lo:
                break
            src.append(slice(lo, hi))
            dst.append(slice(start + lo * step.stride, start + (hi - 1) * step.stride + 1, step.stride))
        else:
            spatial[tuple(dst)] += summed[tuple(src)]
    if not (isinstance(weight, int) and weight == 1):
        spatial = spatial * weight
    return np.repeat(spatial[:, None], step.c_in, axis=1)


def descend(spec: NetworkSpec, top: np.ndarray, conv_weight=None, relu_weight=None) -> np.ndarray:
    """Propagate a field over output units down to the input through the whole lattice.

    ``top`` has shape ``(R, C_L, *S_L)``. ``conv_weight(path, step)`` optionally
    multiplies each hop (default 1, i.e. path counting); ``relu_weight`` likewise for
    ReLU layers. Used by path counting and by the closed-form importance predictors.
    """
    return _descend_plan(_plan(spec), top, spec.rank, "", conv_weight, relu_weight)


def _descend_plan(plan, v, rank, prefix, conv_weight, relu_weight):
    for idx in reversed(range(len(plan))):
        layer, in_shape, out_shape, children = plan[idx]
        path = f"{prefix}{idx}"
        if isinstance(layer, (Conv, Dense)):
            step = _conv_step(layer, in_shape, out_shape, rank)
            v = _descend_conv(v, step, 1 if conv_weight is None else conv_weight(path, step))
        elif isinstance(layer, Flatten):
            v = v.reshape(v.shape[0], in_shape.channels, *in_shape.extent)
        elif isinstance(layer, Residual):
            inner = _descend_plan(children, v, rank, f"{path}.inner.", conv_weight, relu_weight)
            if needs_projection(layer, in_shape.channels):
                step = _proj_step(layer, in_shape, out_shape, rank)
                skip = _descend_conv(v, step, 1 if conv_weight is None else conv_weight(f"{path}.proj", step))
            else:
                skip = v
            v = inner + skip
        elif isinstance(layer, ReLU):
            if relu_weight is not None:
                v = v * relu_weight(path)
        elif not isinstance(layer, BatchNorm):
            raise TypeError(f"unsupported layer {layer!r}")
    return v


def count_paths_dp(spec: NetworkSpec) -> PathCountTable:
    """Exact path counts between every output unit and every input unit."""
    shapes = output_shape(spec)
    top, bottom = shapes[-1], shapes[0]
    n_out = top.size
    eye = np.zeros((n_out, n_out), dtype=object)
    eye[...] = 0
    for r in range(n_out):
        eye[r, r] = 1
    v = descend(spec, eye.reshape(n_out, top.channels, *top.extent))
    counts = v.reshape(top.channels, *top.extent, bottom.channels, *bottom.extent)
    return PathCountTable(counts, top, bottom)


def path_field(spec: NetworkSpec) -> PathField:
    """Mean path count over output units (Z = output spatial positions x channels)."""
    shapes = output_shape(spec)
    top, bottom = shapes[-1], shapes[0]
    ones = np.empty((1, top.channels, *top.extent), dtype=object)
    ones[...] = 1
    totals = descend(spec, ones)[0]
    return PathField(totals.reshape(bottom.channels, *bottom.extent), top.size, bottom)


# --- closed forms -----------------------------------------------------------


def multinomial_count(depth: int, k: int, offset: int) -> int:
    """Paths of a single-channel, stride-1 stack of ``depth`` size-``k`` convolutions.

    Sums ``depth! / prod(n_o!)`` over the offset multiplicities ``n_o`` whose
    weighted total ``sum(o * n_o)`` equals ``offset``.
    """
    if depth < 0 or k < 1 or offset < 0 or offset > depth * (k - 1):
        return 0
    total = 0
    fact = math.factorial(depth)

    def split(o, left, target, denom):
        nonlocal total
        if o == 0:
            if target == 0:
                total += fact // (denom * math.factorial(left))
            return
        for n in range(min(left, target // o) + 1):
            split(o - 1, left - n, target - n * o, denom * math.factorial(n))

    split(k - 1, depth, offset, 1)
    return total
