"""SVG renderings of result CSVs (scatter, line, heatmap)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .records import read_csv  # noqa: E402

_LINE_KEYS = ("generation", "epoch", "trial", "step")


def _floats(rows, key):
    return np.array([float(r[key]) if r[key] not in ("", None) else np.nan for r in rows])


def guess_kind(columns) -> str:
    if "S" in columns and "epsilon" in columns:
        return "heatmap"
    if any(k in columns for k in _LINE_KEYS):
        return "line"
    return "scatter"


def _default_axes(kind, columns):
    if kind == "line":
        x = next(k for k in _LINE_KEYS if k in columns)
        y = next((k for k in ("best_fitness", "reward", "mean_reward", "max_abs_diff", "train_loss")
                  if k in columns), columns[-1])
        return x, y
    if kind == "scatter":
        x = "ll" if "ll" in columns else columns[0]
        y = "mean_reward" if "mean_reward" in columns else columns[1]
        return x, y
    return "epsilon", "S"


def render(path, kind: str = "auto", x: str | None = None, y: str | None = None, output=None) -> Path:
    path = Path(path)
    rows = read_csv(path)
    if not rows:
        raise ValueError(f"{path} has no data rows")
    columns = list(rows[0].keys())
    if kind == "auto":
        kind = guess_kind(columns)
    dx, dy = _default_axes(kind, columns)
    x, y = x or dx, y or dy
    for col in (x, y):
        if col not in columns:
            raise ValueError(f"column {col!r} not in {path}")
    fig, ax = plt.subplots(figsize=(5, 4))
    if kind == "heatmap":
        S = sorted({int(r["S"]) for r in rows})
        eps = sorted({float(r["epsilon"]) for r in rows})
        grid = np.full((len(S), len(eps)), np.nan)
        for r in rows:
            if r["mean_reward"] not in ("", None):
                grid[S.index(int(r["S"])), eps.index(float(r["epsilon"]))] = float(r["mean_reward"])
        im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
        ax.set_xticks(range(len(eps)), [f"{e:g}" for e in eps])
        ax.set_yticks(range(len(S)), [str(s) for s in S])
        ax.set_xlabel("epsilon")
        ax.set_ylabel("S")
        fig.colorbar(im, ax=ax, label="mean reward")
    else:
        xs, ys = _floats(rows, x), _floats(rows, y)
        if kind == "line":
            order = np.argsort(xs, kind="stable")
            ax.plot(xs[order], ys[order])
        else:
            ax.scatter(xs, ys, s=8)
        ax.set_xlabel(x)
        ax.set_ylabel(y)
    fig.tight_layout()
    target = Path(output) if output else path.with_suffix(".svg")
    fig.savefig(target, format="svg")
    plt.close(fig)
    return target
