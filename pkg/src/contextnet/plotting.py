"""Report figures rendered straight to PNG files (Agg canvas, no pyplot state)."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

from matplotlib.figure import Figure

from .analysis import CostReport

STYLE = {"linewidth": 1.5, "markersize": 5}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path


def kernel_sweep(rows: Sequence[Mapping], path, reference: Mapping | None = None) -> Path:
    """GFLOPS per second of audio against kernel size, one line per time reduction.

    ``rows`` carry ``reduction``, ``kernel`` and ``gflops``; ``reference`` maps
    ``(reduction, kernel)`` to published values drawn as hollow markers.
    """
    fig = Figure(figsize=(5.0, 3.4))
    ax = fig.add_subplot()
    for i, reduction in enumerate(sorted({r["reduction"] for r in rows})):
        sub = sorted((r for r in rows if r["reduction"] == reduction), key=lambda r: r["kernel"])
        kernels = [r["kernel"] for r in sub]
        color = f"C{i}"
        ax.plot(kernels, [r["gflops"] for r in sub], "o-", color=color, label=f"{reduction} computed", **STYLE)
        if reference:
            ref = [(k, reference[(reduction, k)]) for k in kernels if (reduction, k) in reference]
            if ref:
                ax.plot(*zip(*ref), "s--", color=color, mfc="none", label=f"{reduction} published", **STYLE)
    ax.set_xscale("log", base=2)
    ticks = sorted({r["kernel"] for r in rows})
    ax.set_xticks(ticks, [str(k) for k in ticks])
    ax.minorticks_off()
    ax.set_xlabel("kernel size")
    ax.set_ylabel("encoder GFLOPS / s audio")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def width_sweep(alphas: Sequence[float], params_m: Sequence[float], path,
                reference: Mapping[float, float] | None = None) -> Path:
    fig = Figure(figsize=(5.0, 3.4))
    ax = fig.add_subplot()
    ax.plot(alphas, params_m, "o-", label="computed", **STYLE)
    if reference:
        pts = sorted((a, reference[a]) for a in alphas if a in reference)
        if pts:
            ax.plot(*zip(*pts), "s--", mfc="none", label="published", **STYLE)
    ax.set_xlabel("width multiplier")
    ax.set_ylabel("parameters (M)")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def block_costs(report: CostReport, path) -> Path:
    ids = [b.block_id for b in report.per_block]
    fig = Figure(figsize=(7.0, 4.2))
    top, bottom = fig.subplots(2, 1, sharex=True)
    top.bar(ids, [b.params / 1e3 for b in report.per_block], color="C0")
    top.set_ylabel("params (k)")
    bottom.bar(ids, [b.flops / 1e6 for b in report.per_block], color="C1")
    bottom.set_ylabel("MFLOPS / s audio")
    bottom.set_xlabel("block")
    return _save(fig, path)


def training_curves(metrics: Sequence[Mapping], path) -> Path:
    steps = [m["step"] for m in metrics]
    fig = Figure(figsize=(7.0, 3.2))
    left, right = fig.subplots(1, 2)
    left.plot(steps, [m["train_loss"] for m in metrics], "o-", **STYLE)
    left.set_xlabel("step")
    left.set_ylabel("train loss")
    right.plot(steps, [100 * m["dev_token_error_rate"] for m in metrics], "o-", color="C3", **STYLE)
    right.set_xlabel("step")
    right.set_ylabel("dev token error (%)")
    return _save(fig, path)
