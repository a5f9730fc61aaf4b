"""Command-line interface.

Exit codes: 0 on success, 1 when a verification check fails, 2 on usage errors
and invalid inputs. Every artifact is written atomically.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from pathscape import landscape, lattice, theory, verify
from pathscape.archspec import SpecError, load_spec, output_shape
from pathscape.data import IdxFormatError, parse_data_source
from pathscape.engine import checkpoint, init
from pathscape.io import atomic_write, field_csv, grid_csv, write_json, write_pgm
from pathscape.trainer import TrainConfig, train

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
K_HELP = "odd, >= 3; 3 is the [1,-2,1] second difference per axis, wider stencils smooth it with a binomial kernel"


class UsageError(Exception):
    """Invalid flag combination or input detected after argument parsing."""


def _float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _shared(parser: argparse.ArgumentParser, out_help: str) -> None:
    parser.add_argument("--spec", required=True, help="network architecture JSON")
    parser.add_argument("--out", required=True, help=out_help)
    parser.add_argument("--seed", type=_seed, default=0, help="random seed (default 0)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for Monte-Carlo trials")


def _data_flags(parser: argparse.ArgumentParser, count: int) -> None:
    parser.add_argument("--data", default="synth:translated_bar", help="idx:IMAGES,LABELS or synth:KIND")
    parser.add_argument("--count", type=int, default=count, help="number of synthetic images")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pathscape", description="Path counting and importance landscapes of CNNs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("paths", help="mean path count from the outputs to every input unit")
    _shared(p, "CSV with index,count_numerator,count_denominator,float")
    p.add_argument("--pgm", help="also write a 16-bit PGM heatmap (rank-2 specs)")

    p = sub.add_parser("predict", help="closed-form importance prediction at initialization")
    _shared(p, "CSV of the predicted field (a PGM and a JSON assumptions sidecar are written alongside)")
    p.add_argument("--model", choices=("auto", "linear", "relu", "batchnorm"), default="auto")
    p.add_argument("--batch", type=int, default=64, help="batch size seen by BatchNorm layers")
    p.add_argument("--gamma2", type=float, default=1.0, help="second moment of the BatchNorm scale")
    p.add_argument("--input-variance", type=float, default=1.0)

    p = sub.add_parser("measure", help="importance landscape of a network over a dataset")
    _shared(p, "CSV of the normalized landscape (row,col,value); PGM and JSON summary alongside")
    _data_flags(p, 256)
    p.add_argument("--checkpoint", help="checkpoint prefix; defaults to a fresh initialization from --seed")
    p.add_argument("--estimator", choices=("exact", "mc"), default="exact")
    p.add_argument("--k", type=int, default=3, help=f"Laplacian width for the energy summary ({K_HELP})")

    p = sub.add_parser("verify", help="Monte-Carlo and resampling checks of the predictions")
    p.add_argument("claim", choices=("prop1", "lemma1", "bn", "relu"))
    _shared(p, "JSON report (the measured field is written to the same path with a .csv suffix)")
    p.add_argument("--trials", type=int, default=10000, help="random initializations, or resamples for lemma1")
    p.add_argument("--scales", type=_float_list, help="weight scales for the BatchNorm invariance check")
    p.add_argument("--tolerance", type=float, help="override the check's default tolerance")
    p.add_argument("--batch", type=int, default=64, help="batch size for BatchNorm checks")
    p.add_argument("--criterion", choices=("correlation", "exact"), default="correlation", help="lemma1 criterion")
    p.add_argument("--checkpoint", help="lemma1: checkpoint prefix instead of a fresh initialization")
    _data_flags(p, 256)

    p = sub.add_parser("train", help="train with an optional landscape regularizer")
    _shared(p, "output directory for metrics.jsonl and the checkpoint")
    p.add_argument("--data", default="synth:translated_bar", help="idx:IMAGES,LABELS or synth:KIND")
    p.add_argument("--train-count", type=int, default=2000)
    p.add_argument("--val-count", type=int, default=500)
    p.add_argument("--loss", choices=("none", "curvature", "target"), default="none")
    p.add_argument("--alpha", type=float, default=0.0, help="regularization weight alpha0")
    p.add_argument("--interval", type=int, default=1, help="regularize every N steps with weight alpha0*N")
    p.add_argument("--k", type=int, default=3, help=f"Laplacian width ({K_HELP})")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=TrainConfig.lr0)
    p.add_argument("--momentum", type=float, default=TrainConfig.momentum)
    p.add_argument("--wd", type=float, default=TrainConfig.weight_decay)
    p.add_argument("--crop", action="store_true", help="random reflect-padded crops")
    p.add_argument("--estimator", choices=("exact", "mc"), default="mc", help="landscape estimator for the loss")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.add_argument("--record-time", action="store_true", help="add wall-clock seconds to each metrics line")

    p = sub.add_parser("ablate", help="top-K most salient pixel ablation curve")
    _shared(p, "CSV with K,ratio; a JSON summary is written alongside")
    _data_flags(p, 256)
    p.add_argument("--checkpoint", help="checkpoint prefix; defaults to a fresh initialization from --seed")
    p.add_argument("--k-max", type=int, default=16)

    p = sub.add_parser("smoothness", help="dataset smoothness target")
    _shared(p, "CSV of the target (row,col,value); PGM alongside")
    _data_flags(p, 2000)
    p.add_argument("--k", type=int, default=3, help=f"Laplacian width ({K_HELP})")
    return parser


def _sibling(out: Path, suffix: str) -> Path:
    return out.with_suffix(suffix) if out.suffix else out.with_name(out.name + suffix)


def _plane(field: np.ndarray) -> np.ndarray:
    """Channel-summed field, for heatmaps of (channels, *spatial) arrays."""
    return np.asarray(field, dtype=np.float64).sum(axis=0)


def _dataset(args, spec, count=None):
    extent = tuple(spec.input_extent)
    data = parse_data_source(args.data, args.count if count is None else count, extent, args.seed)
    expected = (spec.input_channels,) + extent
    if data.sample_shape != expected:
        raise UsageError(f"dataset samples have shape {data.sample_shape}, spec expects {expected}")
    return data


def _network(args, spec):
    if getattr(args, "checkpoint", None):
        net, _, _ = checkpoint.load(args.checkpoint)
        return net
    return init(spec, args.seed)


def cmd_paths(args, spec) -> int:
    pf = lattice.path_field(spec)
    atomic_write(args.out, field_csv(pf.values))
    if args.pgm:
        write_pgm(args.pgm, _plane(pf.as_float()))
    return EXIT_OK


def _prediction(args, spec) -> theory.TheoryPrediction:
    model = args.model
    if model == "auto":
        kinds = {type(layer).__name__ for layer in theory._layers(spec.layers)}
        model = "batchnorm" if "BatchNorm" in kinds else "relu" if "ReLU" in kinds else "linear"
    if model == "linear":
        return theory.predict_linear(spec)
    if model == "relu":
        return theory.predict_relu(spec)
    return theory.predict_batchnorm(spec, args.gamma2, args.input_variance, theory.bn_sample_sizes(spec, args.batch))


def cmd_predict(args, spec) -> int:
    pred = _prediction(args, spec)
    out = Path(args.out)
    atomic_write(out, field_csv(pred.field))
    write_pgm(_sibling(out, ".pgm"), _plane(pred.field))
    write_json(_sibling(out, ".json"), {"assumptions": verify.checks._jsonable(pred.assumptions),
                                        "error_order": pred.error_order})
    return EXIT_OK


def cmd_measure(args, spec) -> int:
    net = _network(args, spec)
    data = _dataset(args, net.spec)
    with net.mode(False):
        if args.estimator == "exact":
            i2 = landscape.importance_squared_exact(net, data.images)
        else:
            i2 = landscape.importance_squared_mc(net, data.images, np.random.default_rng(args.seed))
    field2d = landscape.normalize_to_2d(i2)
    out = Path(args.out)
    atomic_write(out, grid_csv(field2d))
    write_pgm(_sibling(out, ".pgm"), field2d)
    write_json(_sibling(out, ".json"), {
        "estimator": i2.estimator, "images": i2.count, "tv": landscape.total_variation(field2d),
        "laplacian_energy": float(landscape.laplacian_energy(field2d, args.k)), "k": args.k,
    })
    return EXIT_OK


def _tolerance(args, default: float) -> float:
    return default if args.tolerance is None else args.tolerance


def cmd_verify(args, spec) -> int:
    if args.trials < 2:
        raise UsageError("--trials must be at least 2")
    if args.claim == "prop1":
        report = verify.path_sum_check(spec, args.trials, args.seed, _tolerance(args, 5.0), threads=args.threads)
    elif args.claim == "relu":
        report = verify.relu_check(spec, args.trials, args.seed, _tolerance(args, 0.05), threads=args.threads)
    elif args.claim == "bn":
        if args.scales:
            report = verify.bn_weight_scale_invariance(spec, args.scales, args.trials, args.seed, args.batch,
                                                       _tolerance(args, 0.05), threads=args.threads)
        else:
            report = verify.batchnorm_prediction_check(spec, args.batch, args.trials, args.seed,
                                                       _tolerance(args, 0.10), threads=args.threads)
    else:
        net = _network(args, spec)
        data = _dataset(args, net.spec)
        locations = list(np.ndindex(*data.sample_shape))
        kwargs = {"criterion": args.criterion}
        if args.tolerance is not None:
            kwargs["min_correlation" if args.criterion == "correlation" else "sigmas"] = args.tolerance
        report = verify.lemma1_check(net, data.images, locations, args.trials, args.seed, **kwargs)
    out = Path(args.out)
    write_json(out, report.to_dict())
    atomic_write(_sibling(out, ".csv"), field_csv(np.asarray(report.measured, dtype=np.float64)))
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_train(args, spec) -> int:
    total = args.train_count + args.val_count
    data = parse_data_source(args.data, total, tuple(spec.input_extent), args.seed)
    if len(data) < total and args.data.startswith("idx:"):
        raise UsageError(f"IDX data has {len(data)} samples, fewer than {total} requested")
    train_data, val_data = data.subset(slice(0, total)).split_at(args.train_count)
    config = TrainConfig(
        loss_kind=args.loss, alpha0=args.alpha, interval=args.interval, k=args.k, epochs=args.epochs,
        batch_size=args.batch, lr0=args.lr, momentum=args.momentum, weight_decay=args.wd, seed=args.seed,
        mc_landscape=args.estimator == "mc", crop=args.crop, record_time=args.record_time,
    )
    train(spec, train_data, val_data, config, out_dir=args.out, resume=args.resume, stream=sys.stdout)
    return EXIT_OK


def cmd_ablate(args, spec) -> int:
    net = _network(args, spec)
    data = _dataset(args, net.spec)
    curve = verify.topk_ablation(net, data.images, args.k_max)
    out = Path(args.out)
    rows = "".join(f"{k},{float(v)!r}\n" for k, v in enumerate(curve))
    atomic_write(out, "K,ratio\n" + rows)
    auc = float(np.sum((curve[1:] + curve[:-1]) / 2.0)) if len(curve) > 1 else 0.0
    write_json(_sibling(out, ".json"), {"k_max": len(curve) - 1, "area_under_curve": auc, "curve": curve.tolist()})
    return EXIT_OK


def cmd_smoothness(args, spec) -> int:
    data = _dataset(args, spec)
    target = landscape.smoothness_target(data.images, args.k)
    out = Path(args.out)
    atomic_write(out, grid_csv(target))
    write_pgm(_sibling(out, ".pgm"), target)
    return EXIT_OK


COMMANDS = {
    "paths": cmd_paths, "predict": cmd_predict, "measure": cmd_measure, "verify": cmd_verify,
    "train": cmd_train, "ablate": cmd_ablate, "smoothness": cmd_smoothness,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if getattr(args, "threads", 1) < 1:
        print("pathscape: error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        spec = load_spec(args.spec)
        output_shape(spec)
        return COMMANDS[args.command](args, spec)
    except (UsageError, SpecError, IdxFormatError, theory.WrongRegimeError, landscape.NormalizationError,
            FileNotFoundError, ValueError) as exc:
        print(f"pathscape {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
