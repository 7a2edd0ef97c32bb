"""Single-binary CLI: preprocess, synth, train, probe, mask-viz, weights-viz, coverage.

Exit codes: 0 on success, 1 on validation errors (bad flags, bad config,
invalid pairings; message on stderr), 2 on runtime failures.  Every
subcommand takes ``--seed`` (falling back to the MEFEM_SEED environment
variable, then 0) and prints it in its output header.  Config precedence for
training is flags > config file > defaults, and the resolved configuration
is printed at startup.  All file outputs are written atomically.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import os
import sys
from pathlib import Path

import numpy as np

from .config import TrainConfig, load_config_file
from .export import atomic_write_bytes, atomic_write_text, write_matrix_csv, write_matrix_pgm
from .masking import (
    GridSpec,
    MaskingConfig,
    MultiblockParams,
    StripeParams,
    coverage_map,
)
from .weights import WeightConfig, build_weight_matrix


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would sys.exit(2)
        raise ValidationError(message)


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("MEFEM_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"MEFEM_SEED must be an integer, got {env!r}") from None
    return 0


def _header(command: str, seed: int) -> None:
    print(f"# mefem {command} seed={seed}")


def _save_png_atomic(path: Path, image: np.ndarray) -> None:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


# ---- shared flag groups -----------------------------------------------------


def _add_grid_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--patches-per-axis", type=int, default=14)
    parser.add_argument("--patch-size", type=int, default=16)


def _grid_from_args(args: argparse.Namespace) -> GridSpec:
    return GridSpec(patches_per_axis=args.patches_per_axis, patch_size=args.patch_size)


def _add_masking_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--strategy", choices=("stripe", "quadrant", "multiblock"), default="stripe")
    parser.add_argument("--stripe-width", type=int, default=3)
    parser.add_argument("--stripe-spread", type=float, default=0.175)
    parser.add_argument("--stripe-orientation", choices=("random", "horizontal", "vertical"),
                        default="random")
    parser.add_argument("--multiblock-num-blocks", type=int, default=None,
                        help="override the built-in two-mode mixture with one mode")
    parser.add_argument("--multiblock-scale-min", type=float, default=0.15)
    parser.add_argument("--multiblock-scale-max", type=float, default=0.2)
    parser.add_argument("--multiblock-aspect-min", type=float, default=0.75)
    parser.add_argument("--multiblock-aspect-max", type=float, default=1.5)


def _masking_from_args(args: argparse.Namespace) -> MaskingConfig:
    kwargs = {}
    if args.multiblock_num_blocks is not None:
        kwargs["multiblock"] = (
            MultiblockParams(
                num_blocks=args.multiblock_num_blocks,
                scale_range=(args.multiblock_scale_min, args.multiblock_scale_max),
                aspect_range=(args.multiblock_aspect_min, args.multiblock_aspect_max),
            ),
        )
    return MaskingConfig(
        strategy=args.strategy,
        stripe=StripeParams(
            width=args.stripe_width,
            center_spread=args.stripe_spread,
            orientation=args.stripe_orientation,
        ),
        **kwargs,
    )


def _add_train_config_flags(parser: argparse.ArgumentParser, skip: tuple[str, ...] = ()) -> None:
    """One flag per TrainConfig field; unset flags defer to file/defaults."""
    for f in dataclasses.fields(TrainConfig):
        if f.name in skip:
            continue
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}",
                            type=str, default=None, metavar="V")


def _train_config_from_args(args: argparse.Namespace) -> TrainConfig:
    file_values: dict[str, str] = {}
    if getattr(args, "config", None):
        file_values = load_config_file(args.config)
    flag_values = {
        f.name: getattr(args, f"cfg_{f.name}")
        for f in dataclasses.fields(TrainConfig)
        if getattr(args, f"cfg_{f.name}", None) is not None
    }
    if "seed" not in file_values and "seed" not in flag_values:
        flag_values["seed"] = str(_resolve_seed(None))
    config = TrainConfig.from_mapping(file_values)
    return TrainConfig.from_mapping(flag_values, base=config)


# ---- subcommands ------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> None:
    from .synthdata import ATTRIBUTE_NAMES, make_dataset, write_attributes_csv

    seed = _resolve_seed(args.seed)
    _header("synth", seed)
    grid = _grid_from_args(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    images, attrs = make_dataset(args.count, seed, grid, workers=args.workers)
    names = [f"synth_{i:06d}.png" for i in range(args.count)]
    for name, image in zip(names, images):
        _save_png_atomic(out_dir / name, image)
    csv_text = ",".join(["filename", *ATTRIBUTE_NAMES]) + "\n"
    for name, a in zip(names, attrs):
        csv_text += ",".join([name] + [f"{getattr(a, n):.8f}" for n in ATTRIBUTE_NAMES]) + "\n"
    atomic_write_text(out_dir / "attributes.csv", csv_text)
    print(f"wrote {args.count} images to {out_dir}")


def cmd_preprocess(args: argparse.Namespace) -> None:
    from .preprocess import run_manifest

    seed = _resolve_seed(args.seed)
    _header("preprocess", seed)
    grid = _grid_from_args(args)
    counts = run_manifest(args.manifest, args.out, grid, min_side=args.min_side,
                          workers=args.workers)
    for key in ("accepted", "rejected_boundary", "rejected_resolution", "unreadable"):
        print(f"{key} = {counts[key]}")


def cmd_coverage(args: argparse.Namespace) -> None:
    seed = _resolve_seed(args.seed)
    _header("coverage", seed)
    grid = _grid_from_args(args)
    config = _masking_from_args(args)
    rng = np.random.default_rng(seed)
    matrix = coverage_map(config, grid, args.samples, rng)
    write_matrix_csv(args.out, matrix)
    print(f"wrote {grid.patches_per_axis}x{grid.patches_per_axis} coverage CSV to {args.out}")
    if args.pgm:
        write_matrix_pgm(args.pgm, matrix)
        print(f"wrote coverage PGM to {args.pgm}")


def cmd_mask_viz(args: argparse.Namespace) -> None:
    seed = _resolve_seed(args.seed)
    _header("mask-viz", seed)
    grid = _grid_from_args(args)
    config = _masking_from_args(args)
    rng = np.random.default_rng(seed)
    pair = config.sample(grid, rng)
    matrix = np.zeros(grid.num_patches, dtype=np.float64)
    matrix[pair.source] = 1.0
    matrix = matrix.reshape(grid.patches_per_axis, grid.patches_per_axis)
    write_matrix_csv(args.out, matrix)
    print(f"wrote mask CSV to {args.out} (|source|={pair.source.size})")
    if args.pgm:
        write_matrix_pgm(args.pgm, matrix)
        print(f"wrote mask PGM to {args.pgm}")


def cmd_weights_viz(args: argparse.Namespace) -> None:
    seed = _resolve_seed(args.seed)
    _header("weights-viz", seed)
    grid = _grid_from_args(args)
    config = WeightConfig(falloff_radius=args.falloff_radius, steepness=args.steepness,
                          scheme=args.scheme)
    matrix = build_weight_matrix(grid, config).weights
    write_matrix_csv(args.out, matrix)
    print(f"wrote weight CSV to {args.out}")
    if args.pgm:
        write_matrix_pgm(args.pgm, matrix)
        print(f"wrote weight PGM to {args.pgm}")


def _load_train_images(args: argparse.Namespace, config: TrainConfig) -> np.ndarray:
    from .data import load_image_dir
    from .synthdata import make_dataset

    if args.data is not None and args.synth is not None:
        raise ValidationError("--data and --synth are mutually exclusive")
    if args.data is not None:
        return load_image_dir(args.data, config.grid())
    if args.synth is not None:
        images, _ = make_dataset(args.synth, config.seed, config.grid())
        return images
    raise ValidationError("one of --data or --synth is required")


def cmd_train(args: argparse.Namespace) -> None:
    from .trainer import train_loop

    config = _train_config_from_args(args)
    _header("train", config.seed)
    for line in config.to_text().splitlines():
        print(f"# {line}")
    images = _load_train_images(args, config)
    out_dir = Path(args.out)
    state, metrics = train_loop(config, images, out_dir, resume_from=args.resume)
    atomic_write_text(out_dir / "config_used.cfg", config.to_text())
    if metrics:
        losses = [m["loss"] for m in metrics]
        print(f"steps = {len(metrics)}  first_loss = {losses[0]:.6f}  last_loss = {losses[-1]:.6f}")
    print(f"final checkpoint epoch = {state.epoch}")


def cmd_probe(args: argparse.Namespace) -> None:
    from .data import load_labeled_dir
    from .probe import ProbeConfig, append_report_csv, evaluate_encoder
    from .synthdata import ATTRIBUTE_NAMES, make_dataset
    from .trainer import load_train_state
    from .vit import build_models

    seed = _resolve_seed(args.seed)
    _header("probe", seed)
    probe_config = ProbeConfig(
        feature_mode=args.features,
        head=args.head,
        hidden_dim=args.hidden_dim,
        train_fraction=args.train_fraction,
        seed=seed,
        epochs=args.probe_epochs,
    )
    if (args.checkpoint is None) == (not args.random_init):
        raise ValidationError("exactly one of --checkpoint or --random-init is required")
    if args.checkpoint is not None:
        state = load_train_state(args.checkpoint)
        encoder, config = state.encoder, state.config
    else:
        config = _train_config_from_args(args).replace(seed=seed)
        encoder, _, _ = build_models(config.encoder_config(), config.predictor_config(),
                                     seed=config.seed)
    if args.data is not None and args.synth is not None:
        raise ValidationError("--data and --synth are mutually exclusive")
    if args.data is not None:
        images, labels = load_labeled_dir(args.data, args.attribute, config.grid())
    elif args.synth is not None:
        images, attrs = make_dataset(args.synth, seed, config.grid())
        labels = np.asarray([getattr(a, args.attribute) for a in attrs])
    else:
        raise ValidationError("one of --data or --synth is required")
    report = evaluate_encoder(encoder, images, labels, probe_config)
    print(report.to_text(), end="")
    if args.out:
        atomic_write_text(args.out, report.to_text())
    if args.results:
        append_report_csv(args.results, report)


# ---- parser -----------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="mefem", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate procedural face images with attribute labels")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    _add_grid_flags(p)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("preprocess", help="square-crop faces from a bbox manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-side", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    _add_grid_flags(p)
    p.set_defaults(handler=cmd_preprocess)

    p = sub.add_parser("coverage", help="Monte-Carlo source-inclusion probability map")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--pgm", default=None, help="optional PGM output path")
    p.add_argument("--seed", type=int, default=None)
    _add_grid_flags(p)
    _add_masking_flags(p)
    p.set_defaults(handler=cmd_coverage)

    p = sub.add_parser("mask-viz", help="render one sampled mask")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--pgm", default=None)
    p.add_argument("--seed", type=int, default=None)
    _add_grid_flags(p)
    _add_masking_flags(p)
    p.set_defaults(handler=cmd_mask_viz)

    p = sub.add_parser("weights-viz", help="render the loss-weight matrix")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--pgm", default=None)
    p.add_argument("--falloff-radius", type=float, default=5.0)
    p.add_argument("--steepness", type=float, default=1.5)
    p.add_argument("--scheme", choices=("circular", "uniform"), default="circular")
    p.add_argument("--seed", type=int, default=None)
    _add_grid_flags(p)
    p.set_defaults(handler=cmd_weights_viz)

    p = sub.add_parser("train", help="self-supervised pretraining")
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--data", default=None, help="directory of PNG crops")
    p.add_argument("--synth", type=int, default=None, help="train on N generated images")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    _add_train_config_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("probe", help="fit a frozen-feature probe and report metrics")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--random-init", action="store_true",
                   help="probe a freshly initialized encoder instead of a checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None, help="directory with PNGs plus attributes.csv")
    p.add_argument("--synth", type=int, default=None)
    p.add_argument("--attribute", default="face_scale")
    p.add_argument("--features", choices=("patches", "cls", "patches_plus_cls"),
                   default="patches")
    p.add_argument("--head", choices=("attentive_pooler", "mlp"), default="attentive_pooler")
    p.add_argument("--hidden-dim", type=int, default=512)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--probe-epochs", type=int, default=50)
    p.add_argument("--out", default=None, help="report text output path")
    p.add_argument("--results", default=None, help="results CSV to append to")
    p.add_argument("--seed", type=int, default=None)
    _add_train_config_flags(p, skip=("seed",))
    p.set_defaults(handler=cmd_probe)

    return parser


def dispatch(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = getattr(args, "handler", None)
        if handler is None:
            raise ValidationError("a subcommand is required (run with --help)")
        handler(args)
        return 0
    except SystemExit as exc:  # argparse --help
        code = exc.code
        return int(code) if code is not None else 0
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failure
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())
