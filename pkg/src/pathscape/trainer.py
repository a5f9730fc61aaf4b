"""SGD-momentum training with an optional importance-landscape regularizer.

Every ``interval`` steps the landscape loss is evaluated with the network in eval
mode, scaled by ``alpha0 * interval``, and its gradient is added to the
cross-entropy gradient before a single parameter update.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pathscape import landscape
from pathscape.archspec import NetworkSpec, output_shape
from pathscape.data import Dataset
from pathscape.engine import Network, grad, init, no_grad, softmax_cross_entropy
from pathscape.engine import checkpoint
from pathscape.engine import functional as F

LOSS_KINDS = ("none", "curvature", "target")
DECAYED_ROLES = ("weight", "bias")


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN or infinite loss."""


@dataclass
class TrainConfig:
    loss_kind: str = "none"
    alpha0: float = 0.0
    interval: int = 1
    k: int = 3
    epochs: int = 10
    batch_size: int = 32
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    seed: int = 0
    mc_landscape: bool = True
    crop: bool = False
    crop_pad: int = 1
    record_time: bool = False

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.interval < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("interval and batch_size must be positive; epochs non-negative")
        if self.alpha0 < 0 or self.lr0 < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("alpha0, lr0, momentum and weight_decay must be non-negative")
        if self.k < 3 or self.k % 2 == 0:
            raise ValueError("Laplacian width k must be odd and >= 3")

    @property
    def alpha(self) -> float:
        """Weight applied on regularization steps: ``alpha0 * interval``."""
        return self.alpha0 * self.interval

    def regularizes(self, step: int) -> bool:
        return self.loss_kind != "none" and self.alpha0 > 0 and step % self.interval == 0


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    val_top1: float
    val_top5: float
    val_top5_degenerate: bool
    val_loss: float
    tv: float | None
    laplacian_energy: float | None
    reg_steps: int = 0
    wall_clock: float | None = None

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        if out["wall_clock"] is None:
            del out["wall_clock"]
        return out


@dataclass
class OptimizerState:
    buffers: dict = field(default_factory=dict)
    step: int = 0


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """``lr0 * (1 + cos(pi * step / total_steps)) / 2``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def regularization_loss(net: Network, images: np.ndarray, config: TrainConfig, step: int, target=None):
    """Landscape loss on a batch, differentiable with respect to the parameters."""
    if config.mc_landscape:
        rng = np.random.default_rng([config.seed, step, 1])
        i2 = landscape.importance_squared_mc(net, images, rng, create_graph=True)
    else:
        i2 = landscape.importance_squared_exact(net, images, create_graph=True)
    field2d = landscape.normalize_to_2d(i2)
    if config.loss_kind == "curvature":
        return landscape.loss_curvature(field2d, config.k)
    if target is None:
        raise ValueError("loss_kind='target' needs the smoothness target")
    return landscape.loss_target(field2d, target)


def pilcro_step(net: Network, images: np.ndarray, labels: np.ndarray, config: TrainConfig, step: int,
                total_steps: int, state: OptimizerState, target=None, batch_index: int | None = None) -> dict:
    """One cross-entropy step, plus the scaled landscape gradient on regularization steps."""
    params = net.parameters()
    net.train()
    loss, _ = softmax_cross_entropy(net.logits(images), labels)
    if not np.isfinite(loss.item()):
        raise NonFiniteLossError(f"non-finite loss {loss.item()} at step {step} (batch {batch_index})")
    grads = [g.data for g in grad(loss, params)]
    metrics = {"loss": loss.item(), "reg_loss": None}
    if config.regularizes(step):
        try:
            reg = regularization_loss(net, images, config, step, target)
        except landscape.NormalizationError:
            reg = None
        if reg is not None:
            if not np.isfinite(reg.item()):
                raise NonFiniteLossError(f"non-finite regularization loss at step {step} (batch {batch_index})")
            reg_grads = grad(reg * config.alpha, params)
            grads = [g + r.data for g, r in zip(grads, reg_grads)]
            metrics["reg_loss"] = reg.item()
    lr = cosine_lr(step, total_steps, config.lr0)
    for p, g in zip(params, grads):
        if config.weight_decay and p.role in DECAYED_ROLES:
            g = g + config.weight_decay * p.data
        buf = state.buffers.get(p.name)
        buf = g.copy() if buf is None else config.momentum * buf + g
        state.buffers[p.name] = buf
        p.data -= lr * buf
    state.step = step + 1
    metrics["lr"] = lr
    return metrics


def random_crop(images: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    """Reflect-pad every spatial axis by ``pad`` and crop back at a random offset per image."""
    rank = images.ndim - 2
    padded = np.pad(images, [(0, 0), (0, 0)] + [(pad, pad)] * rank, mode="reflect")
    out = np.empty_like(images)
    offsets = rng.integers(0, 2 * pad + 1, size=(len(images), rank))
    for m, off in enumerate(offsets):
        window = tuple(slice(o, o + n) for o, n in zip(off, images.shape[2:]))
        out[m] = padded[(m, slice(None)) + window]
    return out


def _check_compatible(spec: NetworkSpec, data: Dataset) -> None:
    expected = (spec.input_channels,) + tuple(spec.input_extent)
    if tuple(data.sample_shape) != expected:
        raise ValueError(f"dataset samples have shape {data.sample_shape}, spec expects {expected}")
    top = output_shape(spec)[-1]
    if top.size < data.num_classes:
        raise ValueError(f"network emits {top.size} logits for {data.num_classes} classes")


def evaluate(net: Network, data: Dataset, k: int = 3, batch_size: int = 256) -> dict:
    """Eval-mode accuracy, cross-entropy, and the landscape's TV and Laplacian energy."""
    correct1 = correct5 = 0
    total_loss = 0.0
    with no_grad(), net.mode(False):
        for i in range(0, len(data), batch_size):
            logits = net.logits(data.images[i:i + batch_size]).data
            labels = data.labels[i:i + batch_size]
            logp = F.log_softmax(logits).data
            total_loss -= float(logp[np.arange(len(labels)), labels].sum())
            rank = np.argsort(-logits, axis=1, kind="stable")
            correct1 += int((rank[:, 0] == labels).sum())
            correct5 += int((rank[:, :5] == labels[:, None]).any(axis=1).sum())
    n = len(data)
    degenerate = logits.shape[1] < 5
    try:
        field2d = landscape.normalize_to_2d(landscape.importance_squared_exact(net, data.images))
        tv = landscape.total_variation(field2d)
        energy = float(landscape.laplacian_energy(field2d, k))
    except landscape.NormalizationError:
        tv = energy = None
    return {
        "top1": correct1 / n,
        "top5": 1.0 if degenerate else correct5 / n,
        "top5_degenerate": degenerate,
        "loss": total_loss / n,
        "tv": tv,
        "laplacian_energy": energy,
    }


def train(spec: NetworkSpec, train_data: Dataset, val_data: Dataset, config: TrainConfig, out_dir=None,
          resume: bool = False, stream=None, stop_after: int | None = None) -> tuple:
    """Train and return ``(history, network)``.

    With ``out_dir`` a checkpoint (``checkpoint.json``/``.bin``) is written after every
    epoch and one JSON line per epoch is written to ``metrics.jsonl``; ``resume``
    continues from that checkpoint. ``stop_after`` ends the run early after that many
    epochs (the schedule still spans ``config.epochs``).
    """
    _check_compatible(spec, train_data)
    _check_compatible(spec, val_data)
    out_dir = Path(out_dir) if out_dir is not None else None
    net = init(spec, config.seed)
    state = OptimizerState()
    history: list = []
    first_epoch = 0
    if resume:
        if out_dir is None:
            raise ValueError("resume needs out_dir")
        net, extra, manifest = checkpoint.load(out_dir / "checkpoint")
        state.buffers = dict(extra)
        state.step = int(manifest["meta"]["step"])
        first_epoch = int(manifest["meta"]["epoch"])
        history = [MetricsRecord(**h) for h in manifest["meta"]["history"]]
    target = landscape.smoothness_target(train_data.images, config.k) if config.loss_kind == "target" else None
    steps_per_epoch = math.ceil(len(train_data) / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    metrics_path = out_dir / "metrics.jsonl" if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        # On resume the stream is rebuilt from the checkpoint so it never holds
        # epochs the restored state has not seen.
        metrics_path.write_text("".join(json.dumps(h.to_dict(), sort_keys=True) + "\n" for h in history))
        if not resume:
            _save(out_dir, net, config, state, 0, history)
    last = config.epochs if stop_after is None else min(config.epochs, first_epoch + stop_after)
    for epoch in range(first_epoch, last):
        started = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_data))
        crop_rng = np.random.default_rng([config.seed, epoch, 2])
        losses, reg_steps = [], 0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            images = train_data.images[idx]
            if config.crop:
                images = random_crop(images, config.crop_pad, crop_rng)
            step = epoch * steps_per_epoch + b
            m = pilcro_step(net, images, train_data.labels[idx], config, step, total_steps, state, target, b)
            losses.append(m["loss"])
            reg_steps += m["reg_loss"] is not None
        ev = evaluate(net, val_data, config.k)
        record = MetricsRecord(epoch + 1, float(np.mean(losses)), ev["top1"], ev["top5"], ev["top5_degenerate"],
                               ev["loss"], ev["tv"], ev["laplacian_energy"], reg_steps,
                               time.perf_counter() - started if config.record_time else None)
        history.append(record)
        line = json.dumps(record.to_dict(), sort_keys=True)
        if stream is not None:
            print(line, file=stream)
        if out_dir is not None:
            with open(metrics_path, "a") as fh:
                fh.write(line + "\n")
            _save(out_dir, net, config, state, epoch + 1, history)
    return history, net


def _save(out_dir: Path, net: Network, config: TrainConfig, state: OptimizerState, epoch: int, history: list) -> None:
    meta = {"epoch": epoch, "step": state.step, "config": dataclasses.asdict(config),
            "history": [dataclasses.asdict(h) for h in history]}
    checkpoint.save(out_dir / "checkpoint", net, config.seed, state.buffers, meta)

