"""Confusion-matrix metrics, hyperparameter sweeps, and report rendering.

The positive class is "attack" (label 1). Undefined ratios (empty
denominators) are flagged as None and rendered "n/a" rather than coerced to
0 or 1, so degenerate splits stay visible in reports.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import EvalError, ToolkitError
from .lstm import TrainConfig, predict_proba, train


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.fp + self.tn


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float | None
    recall: float | None
    fpr: float | None


def confusion(labels, predictions) -> ConfusionCounts:
    """Count TP/FP/TN/FN over two equal-length binary sequences."""
    y = np.asarray(labels)
    p = np.asarray(predictions)
    if y.shape != p.shape or y.ndim != 1:
        raise EvalError(f"length mismatch: {y.shape} vs {p.shape}")
    for name, arr in (("labels", y), ("predictions", p)):
        if not np.isin(arr, (0, 1)).all():
            raise EvalError(f"{name} must be binary 0/1")
    tp = int(np.sum((y == 1) & (p == 1)))
    fp = int(np.sum((y == 0) & (p == 1)))
    tn = int(np.sum((y == 0) & (p == 0)))
    fn = int(np.sum((y == 1) & (p == 0)))
    return ConfusionCounts(tp, fp, tn, fn)


def metrics(counts: ConfusionCounts) -> MetricsReport:
    """Accuracy, precision, recall, and false-positive rate from counts."""
    if counts.total == 0:
        raise EvalError("empty confusion matrix")
    accuracy = (counts.tp + counts.tn) / counts.total
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else None
    recall = counts.tp / counts.positives if counts.positives else None
    fpr = counts.fp / counts.negatives if counts.negatives else None
    return MetricsReport(counts.tp, counts.fp, counts.tn, counts.fn,
                         accuracy, precision, recall, fpr)


# ---------------------------------------------------------------------------
# Hyperparameter sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepGrid:
    neurons: tuple[int, ...] = (50, 100)
    epochs: tuple[int, ...] = (50, 200, 500)
    batches: tuple[int, ...] = (32, 128, 512, 1024)
    dropouts: tuple[float, ...] = (0.0, 0.5)

    def cells(self) -> list[tuple[int, int, int, float]]:
        """Report order: dropout outer, then neurons, epochs, batch."""
        return [
            (n, e, b, d)
            for d in self.dropouts
            for n in self.neurons
            for e in self.epochs
            for b in self.batches
        ]


def full_grid() -> SweepGrid:
    return SweepGrid()


def desk_grid() -> SweepGrid:
    """Reduced grid for desk-scale runs: long-epoch cells dropped."""
    return SweepGrid(epochs=(50,))


@dataclass
class SweepRow:
    hidden_size: int
    epochs: int
    batch_size: int
    dropout_p: float
    accuracy: float | None
    precision: float | None
    recall: float | None
    fpr: float | None
    train_seconds: float
    error: str | None = None


_WORKER_DATA: dict = {}


def _init_sweep_worker(train_inputs, train_labels, test_inputs, test_labels):
    _WORKER_DATA["data"] = (train_inputs, train_labels, test_inputs, test_labels)


def _run_cell(args):
    cell, base_config, epochs_cap = args
    neurons, epochs, batch, dropout = cell
    train_inputs, train_labels, test_inputs, test_labels = _WORKER_DATA["data"]
    effective_epochs = epochs if epochs_cap is None else min(epochs, epochs_cap)
    config = replace(
        base_config,
        hidden_size=neurons,
        epochs=effective_epochs,
        batch_size=batch,
        dropout_p=dropout,
    )
    try:
        model, history = train(train_inputs, train_labels, config, dtype=np.float32)
        preds = (predict_proba(model, test_inputs) >= config.threshold).astype(np.int8)
        report = metrics(confusion(test_labels, preds))
        return SweepRow(neurons, epochs, batch, dropout, report.accuracy,
                        report.precision, report.recall, report.fpr,
                        sum(history.epoch_seconds))
    except ToolkitError as exc:
        return SweepRow(neurons, epochs, batch, dropout, None, None, None, None,
                        0.0, error=str(exc))


def sweep(
    train_inputs: np.ndarray,
    train_labels: np.ndarray,
    test_inputs: np.ndarray,
    test_labels: np.ndarray,
    grid: SweepGrid | None = None,
    seed: int = 42,
    epochs_cap: int | None = None,
    workers: int = 1,
    base_config: TrainConfig | None = None,
) -> list[SweepRow]:
    """Train one model per grid cell with a shared seed and score it.

    Rows come back in fixed grid order regardless of worker scheduling;
    per-cell training errors are recorded in the row and do not stop the
    sweep. `epochs_cap` limits how long each cell actually trains while the
    row keeps the grid's nominal epoch count (desk-scale execution of the
    full grid layout). Cells train in float32: the grid is a relative
    comparison and single precision roughly halves its wall-clock cost.
    """
    if grid is None:
        grid = desk_grid()
    base = base_config if base_config is not None else TrainConfig()
    base = replace(base, seed=seed)
    train_inputs = np.ascontiguousarray(train_inputs, dtype=np.float32)
    test_inputs = np.ascontiguousarray(test_inputs, dtype=np.float32)
    jobs = [(cell, base, epochs_cap) for cell in grid.cells()]
    if workers <= 1:
        _init_sweep_worker(train_inputs, train_labels, test_inputs, test_labels)
        try:
            return [_run_cell(job) for job in jobs]
        finally:
            _WORKER_DATA.clear()
    with ProcessPoolExecutor(
        max_workers=workers,
        initializer=_init_sweep_worker,
        initargs=(train_inputs, train_labels, test_inputs, test_labels),
    ) as pool:
        return list(pool.map(_run_cell, jobs))


def best_row(rows: list[SweepRow], criterion: str = "accuracy") -> SweepRow:
    """Highest-scoring row; ties broken by precision, recall, smaller batch.

    Deterministic and invariant under row permutation.
    """
    candidates = [r for r in rows if r.error is None and r.accuracy is not None]
    if not candidates:
        raise EvalError("no successful sweep rows")
    if criterion not in ("accuracy", "precision", "recall"):
        raise EvalError(f"unknown criterion {criterion!r}")

    def score(r: SweepRow):
        none_low = lambda v: -1.0 if v is None else v
        primary = none_low(getattr(r, criterion))
        return (
            primary,
            none_low(r.precision),
            none_low(r.recall),
            -r.batch_size,
            -r.hidden_size,
            -r.epochs,
            -r.dropout_p,
        )

    return max(candidates, key=score)


# ---------------------------------------------------------------------------
# Delimited reports
# ---------------------------------------------------------------------------

SWEEP_HEADER = "neurons,epochs,batch,dropout,accuracy,precision,recall,fpr,train_s"
METRICS_HEADER = "tp,fp,tn,fn,accuracy,precision,recall,fpr"


def _fmt(value: float | None, digits: int = 6) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


def sweep_to_csv(rows: list[SweepRow]) -> str:
    lines = [SWEEP_HEADER]
    for r in rows:
        lines.append(
            f"{r.hidden_size},{r.epochs},{r.batch_size},{r.dropout_p:g},"
            f"{_fmt(r.accuracy)},{_fmt(r.precision)},{_fmt(r.recall)},{_fmt(r.fpr)},"
            f"{r.train_seconds:.3f}"
        )
    return "\n".join(lines) + "\n"


def metrics_to_csv(report: MetricsReport) -> str:
    line = (
        f"{report.tp},{report.fp},{report.tn},{report.fn},"
        f"{_fmt(report.accuracy)},{_fmt(report.precision)},"
        f"{_fmt(report.recall)},{_fmt(report.fpr)}"
    )
    return METRICS_HEADER + "\n" + line + "\n"


def correlation_to_csv(corr: np.ndarray) -> str:
    n = corr.shape[0]
    header = "," + ",".join(f"f{i}" for i in range(1, n + 1))
    lines = [header]
    for i in range(n):
        cells = ",".join(
            "n/a" if np.isnan(corr[i, j]) else f"{corr[i, j]:.6f}" for j in range(n)
        )
        lines.append(f"f{i + 1},{cells}")
    return "\n".join(lines) + "\n"
