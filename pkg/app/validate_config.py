from __future__ import annotations

import argparse
import math
from pathlib import Path
from typing import Any

from .common import read_json

RANGE_KEYS = ("width_shift", "height_shift", "brightness", "zoom", "shear")
POSITIVE_RANGE_KEYS = ("brightness", "zoom")
AUGMENT_FLOAT_KEYS = ("rotation_max_deg", "fill_value")
TRAIN_INT_KEYS = ("epochs", "batch_size", "workers")


def fail(msg: str) -> None:
    raise SystemExit(f"[ERROR] {msg}")


def _is_number(value: object) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _is_int(value: object) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _seed_problem(name: str, value: object) -> str:
    if not _is_int(value) or not 0 <= value < (1 << 64):
        return f"{name} must be an unsigned 64-bit integer"
    return ""


def augment_errors(section: object, prefix: str = "augment") -> list[str]:
    if not isinstance(section, dict):
        return [f"{prefix} must be an object"]
    errors: list[str] = []
    known = set(RANGE_KEYS) | set(AUGMENT_FLOAT_KEYS) | {"allow_hflip", "seed"}
    for key, value in section.items():
        name = f"{prefix}.{key}"
        if key not in known:
            errors.append(f"unknown key {name}")
        elif key in RANGE_KEYS:
            if not isinstance(value, list) or len(value) != 2 or not all(_is_number(v) for v in value):
                errors.append(f"{name} must be a [lo, hi] pair of numbers")
            elif value[0] > value[1]:
                errors.append(f"{name} range not ordered: {value}")
            elif key in POSITIVE_RANGE_KEYS and value[0] <= 0:
                errors.append(f"{name} must be strictly positive: {value}")
        elif key == "allow_hflip":
            if not isinstance(value, bool):
                errors.append(f"{name} must be bool")
        elif key == "seed":
            problem = _seed_problem(name, value)
            if problem:
                errors.append(problem)
        elif not _is_number(value):
            errors.append(f"{name} must be a number")
        elif key == "rotation_max_deg" and value < 0:
            errors.append(f"{name} must be >= 0")
    return errors


def train_errors(section: object) -> list[str]:
    if not isinstance(section, dict):
        return ["train must be an object"]
    errors: list[str] = []
    for key, value in section.items():
        name = f"train.{key}"
        if key in TRAIN_INT_KEYS:
            if not _is_int(value) or value < 1:
                errors.append(f"{name} must be an integer >= 1")
        elif key == "seed":
            problem = _seed_problem(name, value)
            if problem:
                errors.append(problem)
        elif key == "lr":
            if not _is_number(value) or value < 0:
                errors.append(f"{name} must be a number >= 0")
        elif key == "momentum":
            if not _is_number(value) or not 0 <= value < 1:
                errors.append(f"{name} must be in [0, 1)")
        elif key == "val_fraction":
            if not _is_number(value) or not 0 < value < 1:
                errors.append(f"{name} must be in (0, 1)")
        elif key == "augment":
            if isinstance(value, dict):
                errors.extend(augment_errors(value, prefix=name))
            elif not isinstance(value, bool):
                errors.append(f"{name} must be bool or an object")
        else:
            errors.append(f"unknown key {name}")
    return errors


def config_errors(cfg: Any) -> list[str]:
    if not isinstance(cfg, dict):
        return ["config must be an object"]
    errors = [f"unknown section {key}" for key in cfg if key not in {"train", "augment"}]
    if "train" in cfg:
        errors.extend(train_errors(cfg["train"]))
    if "augment" in cfg:
        errors.extend(augment_errors(cfg["augment"]))
    return errors


def validate_config(cfg: Any) -> tuple[int, int]:
    errors = config_errors(cfg)
    if errors:
        fail(errors[0])
    return len(cfg.get("train", {})), len(cfg.get("augment", {}))


def main() -> int:
    parser = argparse.ArgumentParser(description="Validate a weldnet JSON config")
    parser.add_argument("config", nargs="?", default="./weldnet.json", help="Path to weldnet.json")
    args = parser.parse_args()

    cfg_path = Path(args.config).expanduser().resolve()
    if not cfg_path.exists():
        fail(f"config not found: {cfg_path}")

    try:
        cfg = read_json(cfg_path)
    except ValueError as exc:
        fail(f"config is not valid JSON: {exc}")
    train_keys, augment_keys = validate_config(cfg)
    print(f"[OK] config valid: {cfg_path}")
    print(f"train_keys={train_keys} augment_keys={augment_keys}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
