"""SVG figures rendered from already-written CSV tables.

Each function takes a CSV path, never in-memory results, so a figure can only
show what the tables contain.
"""

from __future__ import annotations

import io
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .persist import atomic_write, read_csv  # noqa: E402

_RC = {"svg.hashsalt": "subnetlab", "svg.fonttype": "none", "font.size": 9}


def _save(fig, out: str | Path) -> Path:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    atomic_write(out, buf.getvalue())
    return Path(out)


def line_plot(csv_path: str | Path, x: str, y: str, group: str, out: str | Path,
              title: str = "", xlabel: str | None = None, ylabel: str | None = None) -> Path:
    """One line per value of ``group``; points sorted by ``x``."""
    _, rows = read_csv(csv_path)
    series: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for r in rows:
        series[r[group]].append((float(r[x]), float(r[y])))
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for name in sorted(series):
            pts = sorted(series[name])
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, label=name)
        ax.set_xlabel(xlabel or x)
        ax.set_ylabel(ylabel or y)
        if title:
            ax.set_title(title)
        if series:
            ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, out)


def scatter_plot(csv_path: str | Path, x: str, y: str, group: str, out: str | Path,
                 title: str = "") -> Path:
    """Points per ``group`` with the group mean drawn as a line."""
    _, rows = read_csv(csv_path)
    series: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for r in rows:
        series[r[group]].append((float(r[x]), float(r[y])))
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for name in sorted(series):
            pts = np.array(sorted(series[name]))
            line = ax.scatter(pts[:, 0], pts[:, 1], s=8, alpha=0.6, label=name)
            xs = np.unique(pts[:, 0])
            ax.plot(xs, [pts[pts[:, 0] == v, 1].mean() for v in xs], color=line.get_facecolor()[0])
        ax.set_xlabel(x)
        ax.set_ylabel(y)
        if title:
            ax.set_title(title)
        if series:
            ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, out)


def head_heatmap(csv_path: str | Path, value: str, out: str | Path, title: str = "",
                 component: str = "component") -> Path:
    """Layer-by-head grid from rows whose component is named ``L{l}.H{h}``
    (or from ``layer``/``head`` columns when present)."""
    header, rows = read_csv(csv_path)
    cells = {}
    for r in rows:
        if "layer" in header and "head" in header:
            l, h = int(r["layer"]), int(r["head"])
        else:
            name = r[component]
            if ".H" not in name:
                continue
            l_txt, h_txt = name[1:].split(".H")
            l, h = int(l_txt), int(h_txt)
        cells[(l, h)] = float(r[value]) if r[value] not in ("", "nan") else np.nan
    n_l = max((l for l, _ in cells), default=-1) + 1
    n_h = max((h for _, h in cells), default=-1) + 1
    grid = np.full((max(n_l, 1), max(n_h, 1)), np.nan)
    for (l, h), v in cells.items():
        grid[l, h] = v
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(0.6 * grid.shape[1] + 2, 0.5 * grid.shape[0] + 1.2))
        im = ax.imshow(grid, cmap="viridis", aspect="auto")
        for (l, h), v in sorted(cells.items()):
            if np.isfinite(v):
                ax.text(h, l, f"{v:.3g}", ha="center", va="center", color="w", fontsize=7)
        ax.set_xticks(range(grid.shape[1]))
        ax.set_yticks(range(grid.shape[0]))
        ax.set_xlabel("head")
        ax.set_ylabel("layer")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        return _save(fig, out)
