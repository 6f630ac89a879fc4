"""Figure rendering: correlation heatmaps, signal traces, loss and latency.

The correlation heatmap is written as a hand-built SVG (one rect per matrix
cell, diverging blue/white/yellow ramp) so its output is byte-deterministic;
everything else goes through matplotlib's Agg backend to PNG files next to
the delimited reports.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from pathlib import Path

CELL = 24  # heatmap cell edge, px
MARGIN = 64

_PNG_META = {"Software": "cansentry"}


def _ramp_color(r: float) -> str:
    """Map r in [-1, 1] to dark blue -> white -> yellow."""
    if np.isnan(r):
        return "#bbbbbb"
    r = max(-1.0, min(1.0, r))
    if r >= 0:
        # white (1,1,1) toward yellow (1, 0.84, 0)
        g = 1.0 - 0.16 * r
        b = 1.0 - r
        return f"#ff{int(round(g * 255)):02x}{int(round(b * 255)):02x}"
    t = -r  # white toward dark blue (0.07, 0.15, 0.42)
    red = 1.0 - 0.93 * t
    g = 1.0 - 0.85 * t
    b = 1.0 - 0.58 * t
    return f"#{int(round(red * 255)):02x}{int(round(g * 255)):02x}{int(round(b * 255)):02x}"


def heatmap_svg(corr: np.ndarray, labels: list[str] | None = None) -> str:
    """Deterministic SVG grid with one rect per correlation cell."""
    n = corr.shape[0]
    if labels is None:
        labels = [f"f{i}" for i in range(1, n + 1)]
    width = MARGIN + n * CELL + 20
    height = MARGIN + n * CELL + 20
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<style>text{font-family:monospace;font-size:10px;}</style>',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    for i in range(n):
        for j in range(n):
            x = MARGIN + j * CELL
            y = MARGIN + i * CELL
            value = corr[i, j]
            title = "n/a" if np.isnan(value) else f"{value:.3f}"
            parts.append(
                f'<rect class="cell" x="{x}" y="{y}" width="{CELL}" height="{CELL}" '
                f'fill="{_ramp_color(value)}" stroke="#ffffff" stroke-width="1">'
                f"<title>{labels[i]} vs {labels[j]}: {title}</title></rect>"
            )
    for k, label in enumerate(labels):
        parts.append(
            f'<text x="{MARGIN + k * CELL + CELL // 2}" y="{MARGIN - 6}" '
            f'text-anchor="middle">{label}</text>'
        )
        parts.append(
            f'<text x="{MARGIN - 6}" y="{MARGIN + k * CELL + CELL // 2 + 4}" '
            f'text-anchor="end">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _ensure_parent(path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def save_heatmap_svg(path, corr: np.ndarray, labels: list[str] | None = None) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(heatmap_svg(corr, labels))


def save_heatmap_png(path, corr: np.ndarray, labels: list[str] | None = None) -> None:
    n = corr.shape[0]
    if labels is None:
        labels = [f"f{i}" for i in range(1, n + 1)]
    fig, ax = plt.subplots(figsize=(7.5, 6.5))
    masked = np.ma.masked_invalid(corr)
    im = ax.imshow(masked, vmin=-1.0, vmax=1.0, cmap="cividis")
    ax.set_xticks(range(n), labels, rotation=90, fontsize=7)
    ax.set_yticks(range(n), labels, fontsize=7)
    fig.colorbar(im, ax=ax, label="Pearson r")
    ax.set_title("Feature correlation")
    fig.tight_layout()
    _ensure_parent(path)
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def save_signal_plot(
    path,
    timestamps: np.ndarray,
    values: np.ndarray,
    signal_name: str,
    attacked_timestamps: np.ndarray | None = None,
    attacked_values: np.ndarray | None = None,
) -> None:
    """Time series of one decoded signal, injected samples highlighted."""
    fig, ax = plt.subplots(figsize=(9, 4))
    ax.plot(timestamps, values, lw=0.6, color="#26547c", label=signal_name)
    if attacked_timestamps is not None and len(attacked_timestamps):
        ax.scatter(attacked_timestamps, attacked_values, s=4, color="#ef476f",
                   label="injected", zorder=3)
    ax.set_xlabel("time (s)")
    ax.set_ylabel(signal_name)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    _ensure_parent(path)
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def save_loss_plot(path, epoch_losses: list[float]) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(epoch_losses) + 1), epoch_losses, marker="o", ms=3,
            color="#26547c")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.set_yscale("log")
    fig.tight_layout()
    _ensure_parent(path)
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def save_latency_plot(path, report) -> None:
    """Bar chart of per-message communication + computational latency."""
    messages = [m.message for m in report.per_message]
    comm = [m.avg_latency_ms for m in report.per_message]
    comp = [report.comp_latency_ms] * len(messages)
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.bar(messages, comm, color="#26547c", label="communication")
    ax.bar(messages, comp, bottom=comm, color="#ffd166", label="inference")
    ax.axhline(report.deadline_ms, color="#ef476f", ls="--", lw=1,
               label=f"deadline {report.deadline_ms:g} ms")
    ax.set_ylabel("latency (ms)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _ensure_parent(path)
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
