"""Monte-Carlo and resampling checks of the closed-form importance claims."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from pathscape import theory
from pathscape.archspec import BatchNorm, NetworkSpec, output_shape, weight_layers
from pathscape.engine import Network, Tensor, grad, no_grad
from pathscape.engine import functional as F
from pathscape.verify.jacobian import draw_weights, sample0_squared_jacobian

# Floats per trial that one chunk may allocate for a tangent tensor.
_CHUNK_BUDGET = 4_000_000


@dataclass
class MCField:
    mean: np.ndarray
    stderr: np.ndarray
    trials: int
    seed: int

    def relative_stderr(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.mean > 0, self.stderr / self.mean, 0.0)


@dataclass
class VerificationReport:
    claim: str
    predicted: np.ndarray | None
    measured: np.ndarray | None
    stderr: np.ndarray | None
    max_deviation: float
    tolerance: float
    passed: bool
    trials: int
    seed: int
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def plain(v):
            return None if v is None else np.asarray(v).tolist()

        return {
            "claim": self.claim,
            "passed": bool(self.passed),
            "max_deviation": float(self.max_deviation),
            "tolerance": float(self.tolerance),
            "trials": int(self.trials),
            "seed": int(self.seed),
            "predicted": plain(self.predicted),
            "measured": plain(self.measured),
            "stderr": plain(self.stderr),
            "details": _jsonable(self.details),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _normal_inputs(variance: float) -> Callable:
    def draw(rng, shape):
        return math.sqrt(variance) * rng.standard_normal(shape)

    return draw


def _chunk_size(spec: NetworkSpec, batch: int) -> int:
    d = spec.input_channels * math.prod(spec.input_extent)
    widest = max(s.size for s in output_shape(spec))
    per_trial = d * batch * widest
    return int(max(1, min(2000, _CHUNK_BUDGET // per_trial)))


def mc_importance_over_inits(spec: NetworkSpec, trials: int, seed: int, input_distribution=None,
                             batch: int = 1, training: bool = True, weight_scale: float = 1.0,
                             eps: float = 0.0, threads: int = 1) -> MCField:
    """Average of sample-0 squared input gradients over random weights and inputs.

    Each trial draws fresh weights from the network's init scheme (times ``weight_scale``) and a
    batch of ``batch`` inputs, and measures ``(1/Z) Σ_j (∂h_j/∂x_i)²`` on sample 0.
    Trials run in fixed-size chunks seeded by ``(seed, chunk)``, so results do not
    depend on ``threads``. Inputs default to standard normal.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    if input_distribution is None:
        input_distribution = _normal_inputs(1.0)
    size = _chunk_size(spec, batch)
    bounds = [(start, min(trials, start + size)) for start in range(0, trials, size)]
    in_shape = (spec.input_channels,) + tuple(spec.input_extent)

    def run(index):
        start, stop = bounds[index]
        n = stop - start
        rng = np.random.default_rng([seed, index])
        weights = draw_weights(spec, n, rng, weight_scale)
        x = input_distribution(rng, (n, batch) + in_shape)
        sq = sample0_squared_jacobian(spec, weights, x, training, eps)
        return sq.sum(axis=0), (sq * sq).sum(axis=0)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(len(bounds))))
    else:
        parts = [run(i) for i in range(len(bounds))]
    s1 = sum(p[0] for p in parts)
    s2 = sum(p[1] for p in parts)
    mean = s1 / trials
    var = np.maximum(s2 / trials - mean * mean, 0.0) * trials / max(trials - 1, 1)
    return MCField(mean, np.sqrt(var / trials), trials, seed)


def _deviation_sigmas(predicted, measured, stderr) -> np.ndarray:
    gap = np.abs(measured - predicted)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(gap == 0, 0.0, gap / stderr)


def path_sum_check(spec: NetworkSpec, trials: int, seed: int, sigmas: float = 5.0, threads: int = 1) -> VerificationReport:
    """Linear stacks: MC field within ``sigmas`` standard errors of the path-sum prediction."""
    pred = theory.predict_linear(spec).field
    mc = mc_importance_over_inits(spec, trials, seed, threads=threads)
    dev = _deviation_sigmas(pred, mc.mean, mc.stderr)
    worst = float(dev.max())
    return VerificationReport("linear-path-sum", pred, mc.mean, mc.stderr, worst, sigmas, worst <= sigmas, trials, seed,
                              {"unit": "standard errors"})


def relu_check(spec: NetworkSpec, trials: int, seed: int, tolerance: float = 0.05, threads: int = 1) -> VerificationReport:
    """Measured-over-linear ratio at the centre entry equals 2^(-#ReLU) within ``tolerance``."""
    pred = theory.predict_relu(spec)
    relus = pred.assumptions["relu_layers"]
    linear = pred.field * 2.0**relus if relus else pred.field
    mc = mc_importance_over_inits(spec, trials, seed, threads=threads)
    center = tuple(n // 2 for n in pred.field.shape)
    ratio = mc.mean[center] / linear[center]
    expected = 0.5**relus
    dev = abs(ratio / expected - 1.0)
    totals = float(mc.mean.sum() / linear.sum())
    return VerificationReport(
        "relu-attenuation", pred.field, mc.mean, mc.stderr, dev, tolerance, dev <= tolerance, trials, seed,
        {"relu_layers": relus, "center_ratio": float(ratio), "expected_ratio": expected, "total_ratio": totals,
         "center_ratio_stderr": float(mc.stderr[center] / linear[center])},
    )


def batchnorm_prediction_check(spec: NetworkSpec, batch: int, trials: int, seed: int, tolerance: float = 0.10,
                               threads: int = 1) -> VerificationReport:
    """Train-mode MC field against :func:`~pathscape.theory.predict_batchnorm` at interior entries."""
    pred = theory.predict_batchnorm(spec, 1.0, 1.0, theory.bn_sample_sizes(spec, batch)).field
    mc = mc_importance_over_inits(spec, trials, seed, batch=batch, training=True, threads=threads)
    interior = tuple(slice(1, n - 1) if n > 2 else slice(None) for n in pred.shape[1:])
    region = (slice(None),) + interior
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.abs(mc.mean[region] / pred[region] - 1.0)
    worst = float(np.nanmax(rel))
    return VerificationReport("batchnorm-prediction", pred, mc.mean, mc.stderr, worst, tolerance, worst <= tolerance,
                              trials, seed, {"batch": batch, "region": "interior"})


def bn_weight_scale_invariance(spec: NetworkSpec, scales: Sequence[float], trials: int, seed: int, batch: int = 64,
                               tolerance: float = 0.05, threads: int = 1) -> VerificationReport:
    """Train-mode MC fields under conv-weight rescaling, with common random numbers.

    Passes when every scaled field is within ``max(5·stderr, tolerance)`` (relative)
    of the field at the first scale. Without BatchNorm the fields scale as c^(2L)
    and the check fails; the fitted exponent is reported either way.
    """
    scales = [float(c) for c in scales]
    fields = [mc_importance_over_inits(spec, trials, seed, batch=batch, training=True, weight_scale=c, threads=threads)
              for c in scales]
    ref = fields[0]
    live = ref.mean > 0
    allowed = np.maximum(5.0 * ref.relative_stderr()[live], tolerance)
    worst, passed, exponents = 0.0, True, {}
    for c, f in zip(scales, fields):
        rel = np.abs(f.mean[live] / ref.mean[live] - 1.0)
        if rel.size:
            worst = max(worst, float(rel.max()))
            passed = passed and bool(np.all(rel <= allowed))
        if c != scales[0]:
            exponents[str(c)] = float(np.median(np.log(f.mean[live] / ref.mean[live])) / math.log(c / scales[0]))
    return VerificationReport(
        "batchnorm-weight-scale-invariance", None, np.stack([f.mean for f in fields]),
        np.stack([f.stderr for f in fields]), worst, tolerance, passed, trials, seed,
        {"scales": scales, "fitted_exponents": exponents, "batch": batch,
         "has_batchnorm": any(isinstance(layer, BatchNorm) for layer in spec.layers),
         "weight_layers": len(weight_layers(spec))},
    )


# --- permutation importance ------------------------------------------------


def logit_function(net: Network, logit: int = 0, batch_size: int = 4096) -> Callable:
    """Eval-mode scalar output ``x -> h_logit(x)`` evaluated in batches."""

    def f(images: np.ndarray) -> np.ndarray:
        out = []
        with no_grad(), net.mode(False):
            for i in range(0, len(images), batch_size):
                out.append(net.logits(images[i:i + batch_size]).data[:, logit])
        return np.concatenate(out)

    return f


def permutation_importance(f: Callable, images, location: tuple, resamples: int, seed: int,
                           return_stderr: bool = False):
    """E[(E_{x_i}[f] − f)²] with x_i resampled from its empirical marginal.

    For each image the inner expectation is estimated from ``resamples`` draws; the
    finite-sample bias of the squared difference is removed with the usual
    ``s²/R`` correction, so the estimate is unbiased (and exact in expectation for
    linear ``f``). Negative estimates are clipped to 0.
    """
    images = np.asarray(images, dtype=np.float64)
    m = len(images)
    if m < 2:
        raise ValueError("permutation importance needs at least two images")
    if resamples < 10:
        raise ValueError("permutation importance needs at least ten resamples")
    index = (slice(None),) + tuple(location)
    column = images[index]
    if np.all(column == column[0]):
        warnings.warn(f"location {tuple(location)} is constant across the dataset", RuntimeWarning)
        return (0.0, 0.0) if return_stderr else 0.0
    rng = np.random.default_rng(seed)
    base = f(images)
    draws = rng.integers(0, m, size=(m, resamples))
    tiled = np.repeat(images, resamples, axis=0)
    tiled[index] = column[draws.ravel()]
    perturbed = f(tiled).reshape(m, resamples)
    inner = perturbed.mean(axis=1)
    spread = perturbed.var(axis=1, ddof=1)
    terms = (inner - base) ** 2 - spread / resamples
    value = max(float(terms.mean()), 0.0)
    stderr = float(terms.std(ddof=1) / math.sqrt(m))
    return (value, stderr) if return_stderr else value


def gradient_importance(net: Network, images, logit: int = 0) -> np.ndarray:
    """V[x_i]·E[(∂h_logit/∂x_i)²] per input entry, over the empirical distribution."""
    images = np.asarray(images, dtype=np.float64)
    with net.mode(False):
        x = Tensor(images, requires_grad=True)
        out = net.logits(x)
        select = np.zeros(out.shape)
        select[:, logit] = 1.0
        (g,) = grad((out * Tensor(select)).sum(), [x])
    return images.var(axis=0) * (g.data**2).mean(axis=0)


def lemma1_check(net: Network, images, locations: Sequence[tuple], resamples: int, seed: int, logit: int = 0,
                 criterion: str = "correlation", min_correlation: float = 0.95, sigmas: float = 5.0) -> VerificationReport:
    """Permutation importance against variance-scaled squared-gradient importance.

    ``criterion="correlation"`` passes on Pearson r ≥ ``min_correlation`` over at
    least 16 usable locations; ``criterion="exact"`` passes when every pair agrees
    within ``sigmas`` standard errors (appropriate for linear models).
    """
    images = np.asarray(images, dtype=np.float64)
    grad_side = gradient_importance(net, images, logit)
    f = logit_function(net, logit)
    usable, perm, perm_err, predicted = [], [], [], []
    for k, loc in enumerate(locations):
        loc = tuple(int(v) for v in loc)
        column = images[(slice(None),) + loc]
        if np.all(column == column[0]):
            continue
        value, err = permutation_importance(f, images, loc, resamples, int(np.random.SeedSequence([seed, k]).generate_state(1)[0]), True)
        usable.append(loc)
        perm.append(value)
        perm_err.append(err)
        predicted.append(grad_side[loc])
    if len(usable) < 3:
        raise ValueError(f"only {len(usable)} usable (non-constant) locations; need at least 3")
    perm, perm_err, predicted = np.array(perm), np.array(perm_err), np.array(predicted)
    r = float(np.corrcoef(perm, predicted)[0, 1]) if np.std(perm) > 0 and np.std(predicted) > 0 else float("nan")
    dev = _deviation_sigmas(predicted, perm, perm_err)
    if criterion == "correlation":
        passed = len(usable) >= 16 and r >= min_correlation
        worst, tol = 1.0 - r, 1.0 - min_correlation
    elif criterion == "exact":
        worst, tol = float(dev.max()), sigmas
        passed = worst <= sigmas
    else:
        raise ValueError(f"unknown criterion {criterion!r}")
    return VerificationReport(
        "permutation-vs-gradient-importance", predicted, perm, perm_err, worst, tol, bool(passed), resamples, seed,
        {"pearson_r": r, "locations": [list(loc) for loc in usable], "criterion": criterion,
         "max_deviation_sigmas": float(dev.max())},
    )


# --- ablation ---------------------------------------------------------------------


def topk_ablation(net: Network, images, k_max: int, batch_size: int = 256) -> np.ndarray:
    """Mean ratio p_K(c)/p_0(c) after replacing the K most salient pixels.

    ``c`` is each image's predicted class; saliency is the squared input gradient of
    its logit summed over channels, and replaced pixels take the image's per-channel
    mean. Returns the curve for K = 0 … k_max.
    """
    images = np.asarray(images, dtype=np.float64)
    n, channels = images.shape[:2]
    area = math.prod(images.shape[2:])
    k_max = min(int(k_max), area)
    flat = images.reshape(n, channels, area)
    with net.mode(False):
        x = Tensor(images, requires_grad=True)
        logits = net.logits(x)
        cls = logits.data.argmax(axis=1)
        select = np.zeros(logits.shape)
        select[np.arange(n), cls] = 1.0
        (g,) = grad((logits * Tensor(select)).sum(), [x])
    saliency = (g.data.reshape(n, channels, area) ** 2).sum(axis=1)
    order = np.argsort(-saliency, axis=1, kind="stable")
    means = flat.mean(axis=2, keepdims=True)

    def probs(batch):
        out = []
        with no_grad(), net.mode(False):
            for i in range(0, len(batch), batch_size):
                logits = net.logits(batch[i:i + batch_size].reshape((-1,) + images.shape[1:])).data
                out.append(np.exp(F.log_softmax(logits).data))
        return np.concatenate(out)

    base = probs(flat)[np.arange(n), cls]
    curve = [1.0]
    current = flat.copy()
    for k in range(1, k_max + 1):
        cols = order[:, k - 1]
        current[np.arange(n), :, cols] = means[:, :, 0]
        p = probs(current)[np.arange(n), cls]
        curve.append(float(np.mean(p / base)))
    return np.array(curve)
