#!/usr/bin/env python3
"""Run the full desk-scale pipeline through the CLI.

Generates the synthetic cohort, trains the model, writes every evaluation
report, and produces a demo counterfactual and an interventional sample for
the first test subject. Everything lands under the config's out_dir
(runs/desk by default); pass --fresh to wipe that directory first.

Takes a few minutes on one CPU core.
"""

import argparse
import shutil
import sys
import time
from pathlib import Path

from causalmesh import cli
from causalmesh.cohort import CohortManifest
from causalmesh.config import load_config

REPO_ROOT = Path(__file__).resolve().parent.parent


def run(argv: list[str]) -> None:
    print(f"$ causalmesh {' '.join(argv)}", flush=True)
    code = cli.main(argv)
    if code != 0:
        sys.exit(code)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--config",
        default=str(REPO_ROOT / "configs" / "desk.yaml"),
        help="run configuration (default: configs/desk.yaml)",
    )
    parser.add_argument("--fresh", action="store_true", help="delete out_dir and data dir first")
    args = parser.parse_args()

    config = load_config(args.config)
    if args.fresh:
        for stale in (config.out_dir, config.data.dir):
            shutil.rmtree(stale, ignore_errors=True)

    t0 = time.perf_counter()
    run(["generate-data", "--config", args.config])
    run(["train", "--config", args.config])
    print(f"training finished after {time.perf_counter() - t0:.0f}s total", flush=True)

    out = Path(config.out_dir)
    checkpoint = out / "checkpoint.pt"
    data = config.data.dir
    subject = CohortManifest.read(Path(data) / "manifest.csv").split("test")[0].id

    run(
        [
            "evaluate",
            "--checkpoint", str(checkpoint),
            "--data", data,
            "--suite", "all",
            "--out", str(out / "reports"),
        ]
    )
    run(
        [
            "counterfact",
            "--checkpoint", str(checkpoint),
            "--data", data,
            "--subject", subject,
            "--do", "a=80",
            "--do", "s=1",
            "--out", str(out / "counterfactuals"),
        ]
    )
    run(
        [
            "intervene",
            "--checkpoint", str(checkpoint),
            "--do", "a=80 s=1",
            "--n", "8",
            "--out", str(out / "intervention"),
        ]
    )
    print(f"done; artifacts under {out}", flush=True)


if __name__ == "__main__":
    main()
