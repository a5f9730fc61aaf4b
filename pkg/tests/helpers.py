"""Shared builders and independent oracles for the test suite."""

import itertools
import json

import numpy as np

from pathscape.archspec import parse_spec


def make_spec(layers, input_shape, init=None):
    doc = {"rank": len(input_shape) - 1, "input": list(input_shape), "layers": layers}
    if init is not None:
        doc["init"] = init
    return parse_spec(json.dumps(doc))


def conv(k, c_in=1, c_out=1, **kw):
    return {"type": "conv", "k": k, "c_in": c_in, "c_out": c_out, **kw}


def random_lattice_doc(rng, residual=None):
    """Small random spec: L <= 3 convs, K <= 3, C <= 2, extent <= 9, optionally one residual block."""
    rank = int(rng.integers(1, 3))
    channels = int(rng.integers(1, 3))
    kinds = ["conv"] * int(rng.integers(1, 4))
    if residual is None:
        residual = bool(rng.integers(0, 2))
    if residual:
        kinds.insert(int(rng.integers(0, len(kinds) + 1)), "residual")
    layers, c_in, reach = [], channels, 0
    for kind in kinds:
        c_out = int(rng.integers(1, 3))
        if kind == "conv":
            k = int(rng.integers(1, 4))
            layers.append(conv(k, c_in, c_out, bias=False))
            reach += k - 1
        else:
            k = int(rng.choice([1, 3]))
            layers.append({"type": "residual", "inner": [conv(k, c_in, c_out, pad=(k - 1) // 2, bias=False)]})
        c_in = c_out
    extent = [int(rng.integers(reach + 1, 10)) for _ in range(rank)]
    return {"rank": rank, "input": extent + [channels], "layers": layers}


def naive_conv_counts(extent, kernels):
    """Single-channel rank-1 path counts from output position 0, by explicit recursion over offsets."""
    def walk(pos, depth):
        if depth < 0:
            counts[pos] += 1
            return
        for o in range(kernels[depth]):
            walk(pos + o, depth - 1)

    counts = np.zeros(extent, dtype=np.int64)
    walk(0, len(kernels) - 1)
    return counts


def poly_power(k, depth):
    """Coefficients of (1 + x + ... + x^(k-1))^depth."""
    coeffs = np.array([1], dtype=object)
    for _ in range(depth):
        coeffs = np.convolve(coeffs, np.ones(k, dtype=object))
    return [int(c) for c in coeffs]


def naive_total_variation(field):
    field = np.atleast_2d(np.asarray(field, dtype=np.float64))
    total, pairs = 0.0, 0
    rows, cols = field.shape
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                total += (field[r, c + 1] - field[r, c]) ** 2
                pairs += 1
            if r + 1 < rows:
                total += (field[r + 1, c] - field[r, c]) ** 2
                pairs += 1
    return total / pairs


def central_difference(fn, params, eps=1e-6):
    """Numerical gradient of a scalar function over a list of parameter arrays (modified in place)."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        for idx in itertools.product(*(range(n) for n in p.shape)):
            old = p[idx]
            p[idx] = old + eps
            up = fn()
            p[idx] = old - eps
            down = fn()
            p[idx] = old
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads
