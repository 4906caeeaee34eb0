"""ERA curves over L0 distance and mutation-trace length."""
from __future__ import annotations

import io
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .result import AttackResult


def era_curve(results: Sequence[AttackResult], key: str = "l0") -> tuple[np.ndarray, np.ndarray]:
    """Fraction of seeds still not evaded when the attacker may spend up to L.

    ``key`` is ``"l0"`` (feature changes) or ``"trace"`` (mutations).  The
    x grid runs from 0 to the largest cost among successful attacks.
    """
    if not results:
        return np.zeros(0, np.int64), np.zeros(0)
    cost = np.array([(r.l0_distance if key == "l0" else len(r.mutation_trace)) if r.success else np.inf
                     for r in results])
    top = int(cost[np.isfinite(cost)].max()) if np.isfinite(cost).any() else 0
    grid = np.arange(top + 1)
    era = np.array([(cost > g).mean() for g in grid])
    return grid, era


def median_cost(results: Sequence[AttackResult], key: str = "l0") -> float:
    """Median cost with failed seeds counted as infinitely expensive."""
    cost = [(r.l0_distance if key == "l0" else len(r.mutation_trace)) if r.success else np.inf
            for r in results]
    return float(np.median(cost)) if cost else float("nan")


def curves_csv(runs: Mapping[str, Sequence[AttackResult]], key: str = "l0") -> str:
    out = io.StringIO()
    out.write(f"model,{'l0' if key == 'l0' else 'trace_length'},era\n")
    for name in sorted(runs):
        grid, era = era_curve(runs[name], key)
        for g, e in zip(grid, era):
            out.write(f"{name},{g},{e:.6f}\n")
    return out.getvalue()


def plot_curves(runs: Mapping[str, Sequence[AttackResult]], key: str, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "verdoc"  # stable element ids

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name in sorted(runs):
        grid, era = era_curve(runs[name], key)
        if len(grid):
            ax.step(grid, 100 * era, where="post", label=name)
    ax.set_xlabel("L0 distance" if key == "l0" else "mutation trace length")
    ax.set_ylabel("ERA (%)")
    ax.set_ylim(-2, 102)
    if runs:
        ax.legend(fontsize=8)
    fig.tight_layout()
    # fixed metadata keeps the SVG byte-stable across runs
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def attack_report(runs: Mapping[str, Sequence[AttackResult]], out_dir=None) -> dict[str, str]:
    """CSV text for both curve families; also writes CSV and SVG files when ``out_dir`` is given."""
    tables = {"era_vs_l0": curves_csv(runs, "l0"), "era_vs_trace": curves_csv(runs, "trace")}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, key in (("era_vs_l0", "l0"), ("era_vs_trace", "trace")):
            (out / f"{name}.csv").write_text(tables[name])
            plot_curves(runs, key, out / f"{name}.svg")
    return tables
