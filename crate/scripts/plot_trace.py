#!/usr/bin/env python3
"""Plot the per-batch distillation loss curves written by `genie distill`."""
import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("csv", help="bns_trace.csv from a run directory")
    ap.add_argument("-o", "--out", default="bns_trace.png")
    args = ap.parse_args()

    df = pd.read_csv(args.csv)
    fig, ax = plt.subplots(figsize=(6, 4))
    for batch, rows in df.groupby("batch"):
        ax.plot(rows["iter"], rows["loss"], label=f"batch {batch}", lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("BN statistics loss")
    if df["batch"].nunique() <= 8:
        ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)


if __name__ == "__main__":
    main()
