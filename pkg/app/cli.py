from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Sequence

from .augment import AugmentConfig, augment_variants, expand_corpus, single_op_recipes
from .common import LABEL_DIRS, ArgumentError, WeldNetError, log, parse_range, read_json, write_bytes
from .data import (
    FORMAT_EXTENSIONS,
    Dataset,
    encode_image,
    ingest_image,
    load_dataset,
    read_image,
    split,
    synth_dataset,
    write_dataset,
)
from .nn import build_paper_model, infer_shapes
from .report import mark_stage, patch_report, report_path
from .train import TrainConfig, evaluate, load_model, predict, save_model, train, write_metrics_csv
from .validate_config import config_errors

DEFAULT_AUGMENT_COUNT = 9


def _range_arg(text: str) -> tuple[float, float]:
    try:
        return parse_range(text)
    except ArgumentError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _seed_arg(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seed must be an integer: {text!r}") from exc
    if not 0 <= value < (1 << 64):
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer: {text!r}")
    return value


def _report_file(args: argparse.Namespace) -> Path | None:
    root = getattr(args, "report", "")
    if not root:
        return None
    return report_path(Path(root).expanduser(), args.run_name)


def _mark(args: argparse.Namespace, status: str, **extra: Any) -> None:
    report_file = _report_file(args)
    if report_file is not None and args.command in ("synth", "augment", "split", "train", "eval", "predict"):
        mark_stage(report_file, args.command, status, **extra)


def _patch(args: argparse.Namespace, **extra: Any) -> None:
    report_file = _report_file(args)
    if report_file is not None:
        patch_report(report_file, **extra)


def _load_config(args: argparse.Namespace) -> dict[str, Any]:
    path = getattr(args, "config", "")
    if not path:
        return {}
    try:
        cfg = read_json(Path(path).expanduser())
    except ValueError as exc:
        args.parser.error(f"config {path} is not valid JSON: {exc}")
    errors = config_errors(cfg)
    if errors:
        args.parser.error(f"config {path}: {errors[0]}")
    return cfg


def _augment_config(args: argparse.Namespace, cfg: dict[str, Any]) -> AugmentConfig:
    """Recipe (or all-on default) < config `augment` section < explicit flags."""
    base = single_op_recipes()[args.recipe] if getattr(args, "recipe", None) else AugmentConfig()
    if "augment" in cfg:
        base = AugmentConfig.from_mapping(cfg["augment"], base=base)
    overrides: dict[str, Any] = {}
    for flag, key in (
        ("width_shift", "width_shift"),
        ("height_shift", "height_shift"),
        ("brightness", "brightness"),
        ("zoom", "zoom"),
        ("shear", "shear"),
        ("rotation", "rotation_max_deg"),
        ("fill", "fill_value"),
        ("hflip", "allow_hflip"),
        ("seed", "seed"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    try:
        return replace(base, **overrides)
    except ArgumentError as exc:
        args.parser.error(str(exc))


def cmd_synth(args: argparse.Namespace) -> int:
    if args.per_class < 1:
        args.parser.error(f"--per-class must be >= 1, got {args.per_class}")
    out = Path(args.out).expanduser()
    dataset = synth_dataset(args.per_class, args.seed)
    written = write_dataset(dataset, out, fmt="ppm-p6")
    n_neg, n_pos = dataset.class_counts
    log("synth", out=out, files=len(written))
    print(f"wrote={len(written)} ge80={n_pos} lt80={n_neg} seed={args.seed} out={out}")
    _mark(args, "success", seed=args.seed, synth_per_class=args.per_class)
    return 0


def cmd_augment(args: argparse.Namespace) -> int:
    cfg = _augment_config(args, _load_config(args))
    if args.count < 1:
        args.parser.error(f"--count must be >= 1, got {args.count}")
    src = Path(args.input).expanduser()
    out = Path(args.out).expanduser()

    if src.is_dir():
        dataset = load_dataset(src, workers=args.workers)
        expanded = expand_corpus(dataset.samples, cfg, args.count, cfg.seed, workers=args.workers)
        written = write_dataset(Dataset(samples=expanded), out, fmt="ppm-p6")
        dataset_warnings = dataset.warnings
    else:
        img, fmt = read_image(src)
        ext = FORMAT_EXTENSIONS[fmt]
        written = []
        for i, variant in enumerate(augment_variants(img, cfg, args.count, cfg.seed)):
            path = out / f"aug_{i}{ext}"
            write_bytes(path, encode_image(variant, fmt))
            written.append(path)
        dataset_warnings = []

    log("augment", src=src, out=out, files=len(written), seed=cfg.seed)
    print(f"wrote={len(written)} seed={cfg.seed} out={out}")
    _mark(
        args,
        "partial" if dataset_warnings else "success",
        seed=cfg.seed,
        augment_written_count=len(written),
        dataset_warnings=dataset_warnings,
    )
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    if not 0.0 < args.train_fraction < 1.0:
        args.parser.error(f"--train-fraction must be in (0, 1), got {args.train_fraction}")
    dataset = load_dataset(Path(args.data).expanduser(), workers=args.workers)
    train_set, test_set = split(dataset, args.train_fraction, args.seed)
    out = Path(args.out).expanduser()
    write_dataset(train_set, out / "train")
    write_dataset(test_set, out / "test")
    print(f"train={len(train_set)} test={len(test_set)}")
    _mark(
        args,
        "partial" if dataset.warnings else "success",
        seed=args.seed,
        split_train_count=len(train_set),
        split_test_count=len(test_set),
        dataset_warnings=dataset.warnings,
    )
    return 0


def _train_config(args: argparse.Namespace, cfg: dict[str, Any]) -> TrainConfig:
    """Defaults < config `train` section < explicit flags."""
    train_cfg = TrainConfig()
    try:
        if "train" in cfg:
            train_cfg = TrainConfig.from_mapping(cfg["train"], base=train_cfg)
        overrides: dict[str, Any] = {}
        for flag, key in (
            ("epochs", "epochs"),
            ("batch", "batch_size"),
            ("lr", "lr"),
            ("momentum", "momentum"),
            ("seed", "seed"),
            ("val_fraction", "val_fraction"),
            ("workers", "workers"),
        ):
            value = getattr(args, flag)
            if value is not None:
                overrides[key] = value
        if args.augment:
            aug = train_cfg.augment or AugmentConfig()
            if "augment" in cfg:
                aug = AugmentConfig.from_mapping(cfg["augment"], base=aug)
            overrides["augment"] = aug
        train_cfg = replace(train_cfg, **overrides)
        train_cfg.validate()
    except ArgumentError as exc:
        args.parser.error(str(exc))
    return train_cfg


def cmd_train(args: argparse.Namespace) -> int:
    train_cfg = _train_config(args, _load_config(args))
    dataset = load_dataset(Path(args.data).expanduser(), workers=train_cfg.workers)
    for warning in dataset.warnings:
        log("train", dataset_warning=warning)
    _patch(args, dataset_sample_count=len(dataset), dataset_warnings=dataset.warnings)

    model = build_paper_model(train_cfg.seed)
    trained, history = train(model, dataset, train_cfg)
    save_model(trained, Path(args.model).expanduser())
    write_metrics_csv(history, Path(args.metrics).expanduser())

    last = history[-1]
    print(
        f"epoch={last.epoch} train_loss={last.train_loss:.6f} train_acc={last.train_acc:.6f} "
        f"val_loss={last.val_loss:.6f} val_acc={last.val_acc:.6f}"
    )
    _mark(
        args,
        "partial" if dataset.warnings else "success",
        seed=train_cfg.seed,
        dataset_sample_count=len(dataset),
        dataset_warnings=dataset.warnings,
        epochs_run=len(history),
        history=[r.as_dict() for r in history],
        final_train_loss=last.train_loss,
        final_train_acc=last.train_acc,
        final_val_loss=last.val_loss,
        final_val_acc=last.val_acc,
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_model(Path(args.model).expanduser())
    dataset = load_dataset(Path(args.data).expanduser(), workers=args.workers)
    result = evaluate(model, dataset, workers=args.workers)
    print(
        f"loss={result.loss:.6f} accuracy={result.accuracy:.6f} "
        f"tp={result.tp} fp={result.fp} fn={result.fn} tn={result.tn}"
    )
    _mark(
        args,
        "partial" if dataset.warnings else "success",
        dataset_sample_count=len(dataset),
        dataset_warnings=dataset.warnings,
        eval_loss=result.loss,
        eval_accuracy=result.accuracy,
        confusion={"tp": result.tp, "fp": result.fp, "fn": result.fn, "tn": result.tn},
    )
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model = load_model(Path(args.model).expanduser())
    img, _ = read_image(Path(args.image).expanduser())
    label, prob = predict(model, ingest_image(img))
    print(f"class={LABEL_DIRS[label]} p={prob:.6f}")
    _mark(args, "success", predictions=[{"image": str(args.image), "class": LABEL_DIRS[label], "p": prob}])
    return 0


def cmd_describe(args: argparse.Namespace) -> int:
    model = load_model(Path(args.model).expanduser()) if args.model else build_paper_model(0)
    shapes = infer_shapes(model)
    print(f"input [{','.join(str(d) for d in shapes[0])}]")
    for i, (layer, shape) in enumerate(zip(model.layers, shapes[1:])):
        print(f"{i} {layer.kind} [{','.join(str(d) for d in shape)}]")
    return 0


def _add_report(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--report", default="", help="Report root; omitted means no run report")
    sub.add_argument("--run-name", default="latest", help="Report subdirectory under --report")


def _add_augment_ranges(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--width-shift", type=_range_arg, default=None, help="Horizontal shift range in pixels, LO,HI")
    sub.add_argument("--height-shift", type=_range_arg, default=None, help="Vertical shift range as height fraction, LO,HI")
    sub.add_argument("--brightness", type=_range_arg, default=None, help="Brightness factor range, LO,HI")
    sub.add_argument("--zoom", type=_range_arg, default=None, help="Zoom factor range, LO,HI")
    sub.add_argument("--shear", type=_range_arg, default=None, help="Shear coefficient range, LO,HI")
    sub.add_argument("--rotation", type=float, default=None, help="Maximum rotation in degrees")
    sub.add_argument("--fill", type=float, default=None, help="Fill value for out-of-bounds pixels")
    flip = sub.add_mutually_exclusive_group()
    flip.add_argument("--hflip", dest="hflip", action="store_const", const=True, default=None)
    flip.add_argument("--no-hflip", dest="hflip", action="store_const", const=False)


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weldnet", description="FSW microstructure CNN toolkit")
    subs = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func: Callable[[argparse.Namespace], int], help_text: str) -> argparse.ArgumentParser:
        sub = subs.add_parser(name, help=help_text)
        sub.set_defaults(func=func, parser=sub)
        return sub

    sub = add("synth", cmd_synth, "Write a balanced synthetic dataset")
    sub.add_argument("--out", required=True, help="Dataset root to create")
    sub.add_argument("--per-class", type=int, required=True, help="Images per class")
    sub.add_argument("--seed", type=_seed_arg, default=0)
    _add_report(sub)

    sub = add("augment", cmd_augment, "Write augmented variants of an image or a dataset")
    sub.add_argument("--in", dest="input", required=True, help="Input image, or a dataset root")
    sub.add_argument("--out", required=True, help="Output directory")
    sub.add_argument("--count", type=int, default=DEFAULT_AUGMENT_COUNT, help="Variants per image")
    sub.add_argument("--seed", type=_seed_arg, default=None)
    sub.add_argument("--recipe", choices=sorted(single_op_recipes()), default=None, help="Start from one single-operation recipe")
    sub.add_argument("--config", default="", help="JSON config with an augment section")
    sub.add_argument("--workers", type=int, default=4)
    _add_augment_ranges(sub)
    _add_report(sub)

    sub = add("split", cmd_split, "Stratified train/test split of a dataset")
    sub.add_argument("--data", required=True, help="Dataset root")
    sub.add_argument("--out", required=True, help="Output root for train/ and test/")
    sub.add_argument("--train-fraction", type=float, default=0.9)
    sub.add_argument("--seed", type=_seed_arg, default=0)
    sub.add_argument("--workers", type=int, default=4)
    _add_report(sub)

    sub = add("train", cmd_train, "Train the classifier")
    sub.add_argument("--data", required=True, help="Dataset root")
    sub.add_argument("--model", required=True, help="Model file to write")
    sub.add_argument("--metrics", required=True, help="Per-epoch metrics CSV to write")
    sub.add_argument("--epochs", type=int, default=None)
    sub.add_argument("--batch", type=int, default=None)
    sub.add_argument("--lr", type=float, default=None)
    sub.add_argument("--momentum", type=float, default=None)
    sub.add_argument("--seed", type=_seed_arg, default=None)
    sub.add_argument("--val-fraction", type=float, default=None)
    sub.add_argument("--augment", action="store_true", help="Augment training batches")
    sub.add_argument("--config", default="", help="JSON config with train/augment sections")
    sub.add_argument("--workers", type=int, default=None)
    _add_report(sub)

    sub = add("eval", cmd_eval, "Evaluate a saved model on a dataset")
    sub.add_argument("--data", required=True, help="Dataset root")
    sub.add_argument("--model", required=True, help="Model file")
    sub.add_argument("--workers", type=int, default=4)
    _add_report(sub)

    sub = add("predict", cmd_predict, "Classify one image")
    sub.add_argument("--model", required=True, help="Model file")
    sub.add_argument("--image", required=True, help="Image file")
    _add_report(sub)

    sub = add("describe", cmd_describe, "Print the layer shape chain")
    sub.add_argument("--model", default="", help="Saved model; default is a fresh 40x40 model")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_arg_parser()
    args = parser.parse_args(argv)
    if getattr(args, "workers", None) is not None and args.workers < 1:
        args.parser.error(f"--workers must be >= 1, got {args.workers}")
    try:
        return args.func(args)
    except (WeldNetError, OSError) as exc:
        print(f"[{args.command}] failed: {exc}", file=sys.stderr)
        try:
            _mark(args, "failed", error=str(exc))
        except OSError:
            pass
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
