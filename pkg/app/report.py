from __future__ import annotations

import uuid
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from .common import ensure_dir, read_json, write_json

STAGES = ["synth", "augment", "split", "train", "eval", "predict"]
STAGE_STATUSES = {"pending", "success", "partial", "failed"}


def default_report() -> dict[str, Any]:
    return {
        "run_id": str(uuid.uuid4()),
        "generated_at_utc": datetime.now(timezone.utc).isoformat(),
        "stage_status": {stage: "pending" for stage in STAGES},
        "seed": None,
        "synth_per_class": 0,
        "augment_written_count": 0,
        "split_train_count": 0,
        "split_test_count": 0,
        "dataset_sample_count": 0,
        "dataset_warnings": [],
        "epochs_run": 0,
        "history": [],
        "final_train_loss": None,
        "final_train_acc": None,
        "final_val_loss": None,
        "final_val_acc": None,
        "eval_loss": None,
        "eval_accuracy": None,
        "confusion": {"tp": 0, "fp": 0, "fn": 0, "tn": 0},
        "predictions": [],
        "error": "",
    }


def report_path(report_root: Path, name: str) -> Path:
    return report_root / name / "run_report.json"


def load_or_init(report_file: Path) -> dict[str, Any]:
    if report_file.exists():
        return read_json(report_file)
    report = default_report()
    save(report_file, report)
    return report


def save(report_file: Path, report: dict[str, Any]) -> None:
    ensure_dir(report_file.parent)
    write_json(report_file, report)


def mark_stage(report_file: Path, stage: str, status: str, **extra: Any) -> dict[str, Any]:
    if status not in STAGE_STATUSES:
        raise ValueError(f"unknown stage status: {status}")
    report = load_or_init(report_file)
    report.setdefault("stage_status", {})[stage] = status
    for key, value in extra.items():
        report[key] = value
    save(report_file, report)
    return report


def patch_report(report_file: Path, **extra: Any) -> dict[str, Any]:
    report = load_or_init(report_file)
    for key, value in extra.items():
        report[key] = value
    save(report_file, report)
    return report
