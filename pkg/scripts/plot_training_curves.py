#!/usr/bin/env python3
"""Plot training curves from a training_log.csv written by `causalmesh train`.

Writes a two-panel PNG next to the log file: the evidence lower bound
(train and validation) on the left, the reconstruction and divergence terms
plus the per-epoch reconstruction error on the right.
"""

import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def read_log(path: Path) -> dict:
    columns: dict = {}
    with open(path, newline="") as handle:
        for row in csv.DictReader(handle):
            for key, value in row.items():
                columns.setdefault(key, []).append(float(value) if value else None)
    if "epoch" not in columns:
        raise SystemExit(f"{path} is not a training log")
    return columns


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("log", help="path to training_log.csv")
    parser.add_argument("--out", help="output PNG (default: <log dir>/training_curves.png)")
    args = parser.parse_args()

    log_path = Path(args.log)
    cols = read_log(log_path)
    epochs = cols["epoch"]

    fig, (ax_elbo, ax_terms) = plt.subplots(1, 2, figsize=(11, 4))
    ax_elbo.plot(epochs, cols["elbo"], label="train elbo")
    val = [(e, v) for e, v in zip(epochs, cols["val_elbo"]) if v is not None]
    if val:
        ax_elbo.plot(*zip(*val), label="val elbo", linestyle="--")
    ax_elbo.set_xlabel("epoch")
    ax_elbo.set_ylabel("evidence lower bound")
    ax_elbo.legend()

    ax_terms.plot(epochs, cols["recon"], label="recon log-lik")
    ax_terms.plot(epochs, cols["kl"], label="kl")
    ax_terms.set_xlabel("epoch")
    ax_terms.legend(loc="center right")
    ax_ved = ax_terms.twinx()
    ax_ved.plot(epochs, cols["recon_ved"], label="recon ved (mm)", color="tab:red", alpha=0.5)
    ax_ved.set_ylabel("mean vertex error (mm)")
    ax_ved.legend(loc="upper right")

    out = Path(args.out) if args.out else log_path.with_name("training_curves.png")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    print(out)


if __name__ == "__main__":
    main()
