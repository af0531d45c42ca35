"""SVG figures from the CSV artifacts."""

from __future__ import annotations

import csv
import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_csv_columns(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{path} has no data rows")
    cols = {}
    for key in rows[0]:
        vals = []
        for r in rows:
            try:
                vals.append(float(r[key]))
            except (TypeError, ValueError):
                vals.append(math.nan)
        cols[key] = vals
    return cols


def plot_csv(paths, out_path, x=None, y=None, title=None, logy=False):
    """Line plot of columns ``y`` against ``x`` for each CSV; writes SVG.

    ``x`` defaults to the first column, ``y`` to every other numeric column.
    Rows whose ``x`` is not numeric (e.g. a summary row) are skipped.
    """
    if isinstance(paths, str):
        paths = [paths]
    fig, ax = plt.subplots(figsize=(6, 4))
    for path in paths:
        cols = read_csv_columns(path)
        xkey = x or next(iter(cols))
        ykeys = y or [k for k in cols if k != xkey and not all(math.isnan(v) for v in cols[k])]
        xs = cols[xkey]
        keep = [i for i, v in enumerate(xs) if not math.isnan(v)]
        for key in ykeys:
            label = key if len(paths) == 1 else f"{os.path.basename(path)}:{key}"
            ax.plot([xs[i] for i in keep], [cols[key][i] for i in keep], marker=".", label=label)
        ax.set_xlabel(xkey)
    if logy:
        ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend(fontsize="small")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return out_path
