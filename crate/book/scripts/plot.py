"""Plot true sources against matched inferred components for one run directory.

    python book/scripts/plot.py runs/default [out.png]
"""

import csv
import json
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def read_rows(path):
    with open(path) as f:
        r = csv.reader(f)
        header = next(r)
        cols = list(zip(*[[float(v) for v in row] for row in r]))
    return header, [list(c) for c in cols]


def zscore(xs):
    m = sum(xs) / len(xs)
    s = (sum((x - m) ** 2 for x in xs) / len(xs)) ** 0.5
    return [(x - m) / s for x in xs]


def main():
    run = Path(sys.argv[1])
    out = Path(sys.argv[2]) if len(sys.argv) > 2 else run / "components.png"
    _, sources = read_rows(run / "sources.csv")
    sources = sources[1:]
    doc = json.loads((run / "report.json").read_text())
    reports = doc["reports"]

    fig, axes = plt.subplots(len(sources), len(reports), figsize=(4 * len(reports), 2.2 * len(sources)), squeeze=False)
    for c, rep in enumerate(reports):
        _, inferred = read_rows(run / f"inferred_{rep['variant']}.csv")
        inferred = inferred[1:]
        for i, src in enumerate(sources):
            j, sign = rep["permutation"][i], rep["signs"][i]
            ax = axes[i][c]
            ax.plot(src, color="black", lw=1, label="source")
            ax.plot([sign * v for v in zscore(inferred[j])], color="tab:red", lw=1, label="inferred")
            ax.set_title(f"{rep['variant']}  source {i + 1}  rmse {rep['per_source'][i]:.3f}", fontsize=8)
            ax.set_xticks([])
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(out)


if __name__ == "__main__":
    main()
