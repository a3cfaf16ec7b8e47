"""Human-readable tables and result figures.

Figures are drawn on an Agg canvas directly, so nothing here touches pyplot
global state or needs a display.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

LOSS_TERMS = ("total", "ctc_lsa", "ctc_lua", "l_ad", "l_out")


def fmt_cell(v) -> str:
    if isinstance(v, float):
        return "-" if math.isnan(v) else f"{v:.4f}"
    return "-" if v is None else str(v)


def format_table(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    """Left-align the first column, right-align the rest."""
    cells = [[fmt_cell(c) for c in r] for r in rows]
    widths = [max(len(str(h)), *(len(r[i]) for r in cells)) if cells else len(str(h)) for i, h in enumerate(header)]

    def line(vals):
        first = str(vals[0]).ljust(widths[0])
        rest = [str(v).rjust(w) for v, w in zip(vals[1:], widths[1:])]
        return "  ".join([first, *rest]).rstrip()

    out = [line(header), line(["-" * w for w in widths])]
    out += [line(r) for r in cells]
    return "\n".join(out)


def cer_table(per_lang: dict, avg: float, label: str = "CER") -> str:
    langs = sorted(per_lang, key=int)
    return format_table([[label, *(per_lang[k] for k in langs), avg]], ["", *(f"lang{k}" for k in langs), "avg"])


def write_jsonl(path: Path, records: Iterable[dict]):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def _save(fig: Figure, path: Path) -> Path:
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    return path


def plot_training(history: list[dict], path: Path, title: str = "") -> Path:
    """Loss terms per logged step (log scale) and dev CER on a second axis."""
    fig = Figure(figsize=(7, 4))
    ax = fig.add_subplot(111)
    steps = [r for r in history if "total" in r]
    for term in LOSS_TERMS:
        ys = [r[term] for r in steps]
        if any(y > 0 for y in ys):
            ax.plot([r["step"] for r in steps], np.maximum(ys, 1e-12), label=term, lw=1.2)
    ax.set_yscale("log")
    ax.set_xlabel("update")
    ax.set_ylabel("loss")
    evals = [r for r in history if "dev_avg" in r]
    if evals:
        ax2 = ax.twinx()
        ax2.plot([r["step"] for r in evals], [r["dev_avg"] for r in evals], "k--o", ms=3, label="dev CER")
        ax2.set_ylabel("dev CER")
        ax2.set_ylim(bottom=0)
        ax2.legend(loc="upper center", fontsize=8, frameon=False)
    ax.legend(loc="upper right", fontsize=8, frameon=False)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_ablation(rows: list[dict], path: Path) -> Path:
    """Grouped bars: one group per variant, one bar per language plus the average."""
    ok = [r for r in rows if r.get("status") == "ok"]
    fig = Figure(figsize=(max(6, 0.9 * len(ok) + 2), 4))
    ax = fig.add_subplot(111)
    if ok:
        langs = sorted(ok[0]["test_cer"], key=int)
        keys = [*langs, "avg"]
        width = 0.8 / len(keys)
        x = np.arange(len(ok))
        for i, k in enumerate(keys):
            vals = [r["test_avg"] if k == "avg" else r["test_cer"][k] for r in ok]
            ax.bar(x + (i - (len(keys) - 1) / 2) * width, vals, width, label=k if k == "avg" else f"lang{k}")
        ax.set_xticks(x)
        ax.set_xticklabels([r["label"] for r in ok], rotation=35, ha="right", fontsize=8)
        ax.legend(fontsize=8, frameon=False)
    ax.set_ylabel("test CER")
    return _save(fig, path)


def plot_ordering(records: list[dict], path: Path) -> Path:
    """Average test CER of the compared systems, one line per seed."""
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot(111)
    for rec in records:
        names = list(rec["test_avg"])
        ax.plot(names, [rec["test_avg"][n] for n in names], "-o", ms=4, label=f"seed {rec['seed']}")
    ax.set_ylabel("test CER")
    ax.legend(fontsize=8, frameon=False)
    return _save(fig, path)
