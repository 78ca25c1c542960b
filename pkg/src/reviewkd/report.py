"""Report emission for experiment results.

Three formats: a flat CSV, a markdown table, and a rendered PNG figure.  CSV
and markdown output identical bytes for identical results; failed cells show
as an em dash.  Grid cells are colored (or marked) by whether they beat the
plain-student baseline, and full-scale reference numbers ride along for
orientation.
"""

from __future__ import annotations

from pathlib import Path
from typing import Union

from .core import ConfigError
from .experiments import (
    FULL_SCALE_ABLATION_REFERENCE,
    FULL_SCALE_GRID_REFERENCE,
    AblationResult,
    StageGridResult,
)

REPORT_FORMATS = ("csv", "markdown-table", "png-plot")

_FAILED = "—"  # em dash for cells whose runs did not finish

Result = Union[StageGridResult, AblationResult]


def emit_report(results: Result, format: str, out_dir: str | Path = "reports") -> list[Path]:
    """Write the report files for one result object; returns the paths."""
    if format not in REPORT_FORMATS:
        raise ConfigError(
            f"unsupported format {format!r}; expected one of {REPORT_FORMATS}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(results, StageGridResult):
        name, builders = "stage-grid", {
            "csv": _grid_csv,
            "markdown-table": _grid_markdown,
            "png-plot": _grid_png,
        }
    elif isinstance(results, AblationResult):
        name, builders = "ablation", {
            "csv": _ablation_csv,
            "markdown-table": _ablation_markdown,
            "png-plot": _ablation_png,
        }
    else:
        raise ConfigError(f"cannot report on {type(results).__name__}")
    suffix = {"csv": ".csv", "markdown-table": ".md", "png-plot": ".png"}[format]
    path = out / f"{name}{suffix}"
    builders[format](results, path)
    return [path]


def _fmt(value) -> str:
    return _FAILED if value is None else f"{value:.2f}"


def _grid_csv(result: StageGridResult, path: Path) -> None:
    lines = ["student_stage,teacher_stage,mean_accuracy,delta_vs_baseline"]
    for (i, j) in sorted(result.matrix):
        value = result.matrix[(i, j)]
        delta = _FAILED if value is None else f"{value - result.baseline:+.2f}"
        lines.append(f"{i},{j},{_fmt(value)},{delta}")
    path.write_bytes(("\n".join(lines) + "\n").encode())


def _grid_markdown(result: StageGridResult, path: Path) -> None:
    n = result.n_stages
    lines = [
        "# Cross-stage supervision grid",
        "",
        f"Mean of {result.repeats} runs per cell. ▲ above baseline, "
        "▼ below, — failed.",
        "",
        "| student \\ teacher | " + " | ".join(f"t{j}" for j in range(1, n + 1)) + " |",
        "|" + "---|" * (n + 1),
    ]
    for i in range(1, n + 1):
        cells = []
        for j in range(1, n + 1):
            value = result.matrix.get((i, j))
            if value is None:
                cells.append(_FAILED)
            else:
                mark = "▲" if value >= result.baseline else "▼"
                cells.append(f"{value:.2f} {mark}")
        lines.append(f"| s{i} | " + " | ".join(cells) + " |")
    lines += [
        "",
        f"baseline (plain student): {result.baseline:.2f}",
        "",
        "## Full-scale reference (240-epoch runs, full-width models)",
        "",
        f"baseline {FULL_SCALE_GRID_REFERENCE['baseline']:.1f}; cells:",
        "",
    ]
    ref = FULL_SCALE_GRID_REFERENCE["matrix"]
    lines.append("| student \\ teacher | t1 | t2 | t3 | t4 |")
    lines.append("|---|---|---|---|---|")
    for i in range(1, 5):
        row = " | ".join(f"{ref[(i, j)]:.1f}" for j in range(1, 5))
        lines.append(f"| s{i} | {row} |")
    path.write_bytes(("\n".join(lines) + "\n").encode())


def _ablation_csv(result: AblationResult, path: Path) -> None:
    lines = ["row,flags,mean_accuracy,variance"]
    for idx, row in enumerate(result.rows):
        flags = "+".join(row.flags) if row.flags else "none"
        lines.append(f"{idx},{flags},{_fmt(row.mean)},{_fmt(row.variance)}")
    path.write_bytes(("\n".join(lines) + "\n").encode())


def _ablation_markdown(result: AblationResult, path: Path) -> None:
    lines = [
        "# Component ablation ladder",
        "",
        f"Mean and variance of {result.repeats} runs per row; components are "
        "added one at a time.",
        "",
        "| RM | RLF | ABF | HCL | mean | variance | full-scale reference |",
        "|---|---|---|---|---|---|---|",
    ]
    for idx, row in enumerate(result.rows):
        marks = [
            "✓" if flag in row.flags else ""
            for flag in ("RM", "RLF", "ABF", "HCL")
        ]
        ref = (
            f"{FULL_SCALE_ABLATION_REFERENCE[idx]:.1f}"
            if idx < len(FULL_SCALE_ABLATION_REFERENCE)
            else ""
        )
        lines.append(
            "| " + " | ".join(marks) + f" | {_fmt(row.mean)} | "
            f"{_fmt(row.variance)} | {ref} |"
        )
    path.write_bytes(("\n".join(lines) + "\n").encode())


def _grid_png(result: StageGridResult, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    n = result.n_stages
    values = np.full((n, n), np.nan)
    for (i, j), v in result.matrix.items():
        if v is not None:
            values[i - 1, j - 1] = v
    finite = values[np.isfinite(values)]
    spread = max(
        abs(float(finite.max() - result.baseline)) if finite.size else 1.0,
        abs(float(result.baseline - finite.min())) if finite.size else 1.0,
        0.5,
    )
    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    masked = np.ma.masked_invalid(values)
    image = ax.imshow(
        masked,
        cmap="RdBu_r",
        vmin=result.baseline - spread,
        vmax=result.baseline + spread,
    )
    image.cmap.set_bad(color="0.85")
    for i in range(n):
        for j in range(n):
            text = _fmt(result.matrix.get((i + 1, j + 1)))
            ax.text(j, i, text, ha="center", va="center", fontsize=9)
    ax.set_xticks(range(n), [f"t{j}" for j in range(1, n + 1)])
    ax.set_yticks(range(n), [f"s{i}" for i in range(1, n + 1)])
    ax.set_xlabel("teacher stage")
    ax.set_ylabel("student stage")
    ax.set_title(
        f"Cross-stage supervision grid (baseline {result.baseline:.2f}; "
        "red above, blue below)"
    )
    fig.colorbar(image, ax=ax, label="mean accuracy (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _ablation_png(result: AblationResult, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [row.label for row in result.rows]
    means = [row.mean for row in result.rows]
    deviations = [
        (row.variance or 0.0) ** 0.5 if row.mean is not None else 0.0
        for row in result.rows
    ]
    positions = range(len(result.rows))
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    plotted = [m if m is not None else 0.0 for m in means]
    bars = ax.bar(positions, plotted, yerr=deviations, capsize=4, color="#4878cf")
    for row, bar in zip(result.rows, bars):
        if row.mean is None:
            bar.set_color("0.85")
    if result.rows and result.rows[0].mean is not None:
        ax.axhline(result.rows[0].mean, color="0.4", linestyle="--", linewidth=1)
    ax.set_xticks(list(positions), labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("mean accuracy (%)")
    finite = [m for m in means if m is not None]
    if finite:
        low = min(finite)
        ax.set_ylim(max(0.0, low - 5.0), max(finite) + 3.0)
    bottom, top = ax.get_ylim()
    for pos, row in zip(positions, result.rows):
        if row.mean is None:
            ax.text(pos, (bottom + top) / 2, _FAILED, ha="center", fontsize=12)
    ax.set_title(
        "Component ablation (full-scale reference: "
        + " → ".join(f"{v:.1f}" for v in FULL_SCALE_ABLATION_REFERENCE)
        + ")"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


__all__ = [
    "REPORT_FORMATS",
    "emit_report",
]
