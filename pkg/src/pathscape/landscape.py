"""Importance landscapes, their normalization, Laplacian smoothness and the two landscape losses.

Fields use the layout ``(channels, *spatial)`` for I² and ``spatial`` for the
normalized 2D landscape I′. Functions accept numpy arrays or engine tensors and
stay differentiable when given tensors.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass

import numpy as np

from pathscape.engine import functional as F
from pathscape.engine.network import Network
from pathscape.engine.tensor import Tensor, as_tensor, grad, matmul, no_grad, reshape, sqrt

ESTIMATORS = ("exact", "monte_carlo")


class NormalizationError(ZeroDivisionError):
    """The importance field is identically zero, so it has no scale to normalize by."""


@dataclass
class ImportanceLandscape:
    """Dataset-averaged squared input gradients, shape ``(channels, *spatial)``."""

    tensor: Tensor
    count: int
    estimator: str

    @property
    def values(self) -> np.ndarray:
        return self.tensor.data


def _check_batch(net: Network, images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] == 0:
        raise ValueError("importance landscape of an empty dataset")
    return images


def importance_squared_exact(net: Network, images, batch_size: int = 256, create_graph: bool = False) -> ImportanceLandscape:
    """Σ_y p(y|x)·(∂h_y/∂x)² averaged over images, one backward pass per class.

    Runs in eval mode. With ``create_graph`` the result stays differentiable with
    respect to the parameters (class probabilities included).
    """
    images = _check_batch(net, images)
    chunks = [images] if create_graph else [images[i:i + batch_size] for i in range(0, len(images), batch_size)]
    total = None
    with net.mode(False):
        for chunk in chunks:
            x = Tensor(chunk, requires_grad=True)
            logits = net.logits(x)
            probs = F.softmax(logits) if create_graph else Tensor(np.exp(F.log_softmax(logits.data).data))
            part = None
            for y in range(logits.shape[1]):
                select = np.zeros(logits.shape)
                select[:, y] = 1.0
                (g,) = grad((logits * Tensor(select)).sum(), [x], create_graph=create_graph)
                weight = reshape((probs * Tensor(select)).sum(1), (len(chunk),) + (1,) * (x.ndim - 1))
                term = (weight * g * g).sum(0)
                part = term if part is None else part + term
            total = part if total is None else total + part
    return ImportanceLandscape(total * (1.0 / len(images)), len(images), "exact")


def importance_squared_mc(net: Network, images, rng: np.random.Generator, create_graph: bool = False) -> ImportanceLandscape:
    """One class per image drawn from p(y|x); unbiased for the exact landscape."""
    images = _check_batch(net, images)
    with net.mode(False):
        x = Tensor(images, requires_grad=True)
        logits = net.logits(x)
        with no_grad():
            probs = np.exp(F.log_softmax(logits.data).data)
        cum = np.cumsum(probs, axis=1)
        u = rng.random(len(images))[:, None]
        labels = np.minimum((u >= cum).sum(axis=1), probs.shape[1] - 1)
        select = np.zeros(logits.shape)
        select[np.arange(len(images)), labels] = 1.0
        (g,) = grad((logits * Tensor(select)).sum(), [x], create_graph=create_graph)
        total = (g * g).sum(0)
    return ImportanceLandscape(total * (1.0 / len(images)), len(images), "monte_carlo")


def _unwrap(like, result: Tensor):
    return result if isinstance(like, Tensor) else result.data


def normalize_to_2d(field):
    """Channel-norm over Frobenius-norm, scaled by √(spatial size), giving RMS 1.

    Accepts an :class:`ImportanceLandscape`, a tensor, or an array shaped
    ``(channels, *spatial)``; returns a field of shape ``spatial``. A landscape
    built with ``create_graph`` yields a tensor, otherwise an array.
    """
    if isinstance(field, ImportanceLandscape):
        field = field.tensor if field.tensor.requires_grad else field.values
    t = as_tensor(field)
    d = math.prod(t.shape[1:])
    peak = float(np.max(np.abs(t.data))) if t.data.size else 0.0
    if not peak > 0:
        raise NormalizationError("cannot normalize an identically zero importance field")
    # The result is invariant to the field's scale; dividing by the peak first keeps
    # the squares clear of underflow and overflow.
    t = t / Tensor(np.array(peak))
    squares = t * t
    out = sqrt(squares.sum(0)) * math.sqrt(d) / sqrt(squares.sum())
    return _unwrap(field, out)


@functools.lru_cache(maxsize=64)
def laplacian_kernel(k: int) -> np.ndarray:
    """1D second-difference stencil of width ``k``.

    ``k = 3`` is ``[1, -2, 1]``; larger odd widths smooth it with a normalized
    binomial kernel of width ``k - 2``, so the stencil still annihilates affine
    signals.
    """
    if k < 3 or k % 2 == 0:
        raise ValueError(f"Laplacian width must be odd and >= 3, got {k}")
    smooth = np.array([math.comb(k - 3, i) for i in range(k - 2)], dtype=np.float64) / 2.0 ** (k - 3)
    kern = np.convolve([1.0, -2.0, 1.0], smooth)
    kern.setflags(write=False)
    return kern


@functools.lru_cache(maxsize=64)
def _operator(n: int, k: int) -> np.ndarray:
    """Dense ``n x n`` matrix applying the 1D stencil with replicate padding."""
    kern = laplacian_kernel(k)
    r = k // 2
    mat = np.zeros((n, n))
    for i in range(n):
        for t, c in enumerate(kern):
            mat[i, min(max(i + t - r, 0), n - 1)] += c
    mat.setflags(write=False)
    return mat


def laplacian(field, k: int = 3):
    """Δ_k of a rank-1 or rank-2 spatial field, replicate padding at the borders.

    Rank 2 applies the 1D stencil along each axis and adds the results (the
    standard five-point cross for ``k = 3``).
    """
    t = as_tensor(field)
    if t.ndim == 1:
        out = matmul(Tensor(_operator(t.shape[0], k)), reshape(t, (t.shape[0], 1)))
        out = reshape(out, t.shape)
    elif t.ndim == 2:
        h, w = t.shape
        out = matmul(Tensor(_operator(h, k)), t) + matmul(t, Tensor(_operator(w, k).T.copy()))
    else:
        raise ValueError(f"laplacian expects a rank-1 or rank-2 field, got shape {t.shape}")
    return _unwrap(field, out)


def empirical_variance(values):
    t = as_tensor(values)
    n = t.data.size
    if n < 2:
        raise ValueError("empirical variance needs at least two entries")
    centered = t - t.mean()
    return _unwrap(values, (centered * centered).sum() * (1.0 / (n - 1)))


def laplacian_energy(field, k: int = 3):
    """Empirical variance (divisor n − 1) of the Laplacian response."""
    return empirical_variance(laplacian(field, k))


def _normalized_laplacian(image: np.ndarray, k: int) -> np.ndarray | None:
    response = np.stack([laplacian(channel, k) for channel in image])
    frob = np.sqrt(np.sum(response * response))
    if frob == 0:
        return None
    d = math.prod(image.shape[1:])
    return math.sqrt(d) * np.sqrt(np.sum(response * response, axis=0)) / frob


def smoothness_target(images, k: int = 3) -> np.ndarray:
    """Per-pixel mean over images of the normalized Laplacian magnitude.

    Images are ``(M, channels, *spatial)``. Images whose Laplacian vanishes
    everywhere are skipped with a warning.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] == 0:
        raise ValueError("smoothness target of an empty dataset")
    total, used = np.zeros(images.shape[2:]), 0
    for image in images:
        s = _normalized_laplacian(image, k)
        if s is None:
            continue
        total += s
        used += 1
    skipped = len(images) - used
    if skipped:
        warnings.warn(f"skipped {skipped} image(s) with an identically zero Laplacian", RuntimeWarning)
    if used == 0:
        raise NormalizationError("every image has an identically zero Laplacian")
    return total / used


def loss_curvature(landscape, k: int = 3):
    """Laplacian energy of the normalized landscape."""
    return laplacian_energy(landscape, k)


def loss_target(landscape, target):
    """Squared Euclidean distance between the landscape and the smoothness target."""
    t, s = as_tensor(landscape), as_tensor(target)
    if t.shape != s.shape:
        raise ValueError(f"landscape shape {t.shape} does not match target shape {s.shape}")
    diff = t - s
    return _unwrap(landscape, (diff * diff).sum())


def total_variation(field) -> float:
    """Mean squared difference over all axis-aligned neighbouring pairs."""
    field = np.asarray(field, dtype=np.float64)
    sq, pairs = 0.0, 0
    for axis in range(field.ndim):
        if field.shape[axis] < 2:
            continue
        diff = np.diff(field, axis=axis)
        sq += float(np.sum(diff * diff))
        pairs += diff.size
    if pairs == 0:
        raise ValueError(f"field of shape {field.shape} has no neighbouring pairs")
    return sq / pairs
