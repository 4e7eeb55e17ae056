#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Plot a vtpm-sim bench CSV: mean and p95 latency per command, sealed vs plain."""

import argparse
import csv
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def load(path):
    samples = defaultdict(list)
    order = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            cmd = row["command"]
            if cmd not in order:
                order.append(cmd)
            samples[(cmd, row["backend"])].append(int(row["nanos"]))
    return order, samples


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("csv", help="bench CSV written by `vtpm-sim bench`")
    ap.add_argument("-o", "--out", default="bench.png", help="output image")
    args = ap.parse_args()

    order, samples = load(args.csv)
    backends = ["sealed", "plain"]
    x = np.arange(len(order))
    width = 0.38

    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(order)), 4.5))
    for i, b in enumerate(backends):
        data = [np.asarray(samples.get((c, b), [np.nan]), dtype=float) / 1e3 for c in order]
        mean = [d.mean() for d in data]
        p95 = [np.percentile(d, 95) for d in data]
        pos = x + (i - 0.5) * width
        ax.bar(pos, mean, width, label=f"{b} mean")
        ax.scatter(pos, p95, marker="_", s=200, color="black", label="p95" if i == 0 else None)

    ax.set_xticks(x)
    ax.set_xticklabels(order, rotation=40, ha="right")
    ax.set_yscale("log")
    ax.set_ylabel("latency (µs)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
