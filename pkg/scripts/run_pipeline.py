#!/usr/bin/env python3
from __future__ import annotations

import argparse
import subprocess
import sys
from pathlib import Path


def run(cmd: list[str]) -> None:
    print("[run]", " ".join(cmd))
    proc = subprocess.run(cmd)
    if proc.returncode != 0:
        raise SystemExit(proc.returncode)


def main() -> int:
    parser = argparse.ArgumentParser(description="weldnet synth -> split -> train -> eval wrapper")
    parser.add_argument("--work", default="./artifacts", help="Working directory for data, model and metrics")
    parser.add_argument("--per-class", type=int, default=350, help="Synthetic images per class")
    parser.add_argument("--train-fraction", type=float, default=0.857, help="Share of images used for training")
    parser.add_argument("--seed", default="0", help="Seed shared by every stage")
    parser.add_argument("--config", default="", help="Optional weldnet.json")
    parser.add_argument("--report", default="./artifacts/reports", help="Report root")
    parser.add_argument("--run-name", default="pipeline", help="Report subdirectory")
    parser.add_argument("--skip-synth", action="store_true", help="Reuse <work>/synth from a previous run")
    args = parser.parse_args()

    work = Path(args.work).expanduser()
    base = [sys.executable, "-m", "app"]
    shared = ["--report", args.report, "--run-name", args.run_name]

    if not args.skip_synth:
        run(base + ["synth", "--out", str(work / "synth"), "--per-class", str(args.per_class), "--seed", args.seed] + shared)
    run(
        base
        + ["split", "--data", str(work / "synth"), "--out", str(work / "split")]
        + ["--train-fraction", str(args.train_fraction), "--seed", args.seed]
        + shared
    )

    train_cmd = base + [
        "train",
        "--data", str(work / "split" / "train"),
        "--model", str(work / "model.fswc"),
        "--metrics", str(work / "metrics.csv"),
        "--seed", args.seed,
    ]
    if args.config:
        train_cmd += ["--config", args.config]
    run(train_cmd + shared)
    run(base + ["eval", "--data", str(work / "split" / "test"), "--model", str(work / "model.fswc")] + shared)

    print(f"[ok] done model={work / 'model.fswc'} metrics={work / 'metrics.csv'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
