"""Feature assembly and analysis for the detector.

Every arrival of a monitored frame yields one row holding the most recent
value of all catalog signals (value-hold); rows before full signal coverage
are dropped as warm-up. Rows are min-max normalized with train-only
statistics and cut into overlapping fixed-length windows labeled by their
final row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .attack import LabeledTrace
from .codec import MSB_FIRST, SignalCatalog, Trace
from .errors import FeatureAssemblyError, UndefinedCorrelationError


def message_decoders_for(catalog: SignalCatalog) -> dict[int, list[tuple]]:
    """Per-message (column, shift, mask, scale, offset) decode parameters.

    The shift addresses a 64-bit payload word read big-endian for MSB-first
    catalogs and little-endian for LSB-first ones.
    """
    decoders: dict[int, list[tuple]] = {}
    for spec in catalog:
        if catalog.bit_numbering == MSB_FIRST:
            shift = 64 - spec.start_bit - spec.bit_length
        else:
            shift = spec.start_bit
        decoders.setdefault(spec.message_id, []).append(
            (
                spec.feature_no - 1,
                shift,
                (1 << spec.bit_length) - 1,
                spec.scale,
                spec.offset,
            )
        )
    return decoders


@dataclass
class FeatureMatrix:
    """Ordered rows of (timestamp, one value per feature, label)."""

    timestamps: np.ndarray  # (n,)
    values: np.ndarray  # (n, F) scaled physical values
    labels: np.ndarray  # (n,) int8

    def __post_init__(self):
        if not (len(self.timestamps) == len(self.values) == len(self.labels)):
            raise FeatureAssemblyError("timestamps/values/labels length mismatch")

    def __len__(self):
        return len(self.timestamps)

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def slice(self, mask_or_index) -> "FeatureMatrix":
        return FeatureMatrix(
            self.timestamps[mask_or_index],
            self.values[mask_or_index],
            self.labels[mask_or_index],
        )

    def split_at(self, split_s: float) -> tuple["FeatureMatrix", "FeatureMatrix"]:
        """Rows strictly before the split vs. rows at or after it."""
        train = self.timestamps < split_s
        return self.slice(train), self.slice(~train)


def assemble(labeled: LabeledTrace | Trace, catalog: SignalCatalog) -> FeatureMatrix:
    """Value-hold feature rows, one per monitored frame after warm-up.

    The row triggered by a frame carries that frame's label; held values from
    other messages keep their own most recent reading. Raises if some catalog
    signal never appears in the trace.
    """
    if isinstance(labeled, Trace):
        labeled = LabeledTrace(
            labeled, np.zeros(len(labeled), dtype=np.int8),
            np.zeros(len(labeled), dtype=np.int16),
        )
    trace = labeled.frames
    n_features = len(catalog)
    decoders = message_decoders_for(catalog)
    big_endian_word = catalog.bit_numbering == MSB_FIRST

    current = [0.0] * n_features
    seen = [False] * n_features
    pending = n_features
    ts_out, rows, labels_out = [], [], []
    labels = labeled.labels
    for idx, frame in enumerate(trace):
        message_decoders = decoders.get(frame.can_id)
        if message_decoders is None:
            continue
        if big_endian_word:
            word = int.from_bytes(frame.data, "big") << (8 * (8 - frame.dlc))
        else:
            word = int.from_bytes(frame.data, "little")
        for col, shift, mask, scale, offset in message_decoders:
            current[col] = offset + scale * ((word >> shift) & mask)
            if not seen[col]:
                seen[col] = True
                pending -= 1
        if pending:
            continue  # warm-up: not every signal observed yet
        ts_out.append(frame.timestamp)
        rows.append(current.copy())
        labels_out.append(labels[idx])
    if pending:
        missing = [catalog.by_feature(i + 1).qualified_name for i, s in enumerate(seen) if not s]
        raise FeatureAssemblyError(f"signals never observed: {', '.join(missing)}")
    return FeatureMatrix(
        np.asarray(ts_out, dtype=np.float64),
        np.asarray(rows, dtype=np.float64),
        np.asarray(labels_out, dtype=np.int8),
    )


@dataclass
class Normalizer:
    """Per-feature min-max transform fitted on training rows."""

    mins: np.ndarray
    maxs: np.ndarray

    @property
    def spans(self) -> np.ndarray:
        return self.maxs - self.mins

    def transform(self, values: np.ndarray) -> np.ndarray:
        """Map to [0,1]; constant features go to 0, out-of-range values clamp."""
        span = self.spans
        safe = np.where(span > 0, span, 1.0)
        out = (values - self.mins) / safe
        out = np.where(span > 0, out, 0.0)
        return np.clip(out, 0.0, 1.0)


def fit_normalizer(rows: FeatureMatrix | np.ndarray) -> Normalizer:
    values = rows.values if isinstance(rows, FeatureMatrix) else np.asarray(rows)
    if len(values) == 0:
        raise FeatureAssemblyError("cannot fit a normalizer on an empty slice")
    return Normalizer(values.min(axis=0), values.max(axis=0))


@dataclass(frozen=True)
class SequenceWindow:
    """T consecutive normalized rows; the label belongs to the final row."""

    inputs: np.ndarray  # (T, F)
    label: int


class WindowDataset:
    """Sliding windows over a feature matrix, labeled by their last row.

    Behaves as a sequence of SequenceWindow; `inputs` is a zero-copy view of
    shape (count, T, F) and `labels` the matching label array.
    """

    def __init__(self, inputs: np.ndarray, labels: np.ndarray, end_timestamps: np.ndarray):
        self.inputs = inputs
        self.labels = labels
        self.end_timestamps = end_timestamps

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> SequenceWindow:
        return SequenceWindow(self.inputs[i], int(self.labels[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def windows(matrix: FeatureMatrix, T: int = 10, stride: int = 1,
            values: np.ndarray | None = None) -> WindowDataset:
    """Overlapping length-T windows (count = rows - T + 1 at stride 1).

    `values` substitutes a transformed copy of matrix.values (e.g. normalized)
    while keeping the matrix's labels and timestamps.
    """
    if T < 1 or stride < 1:
        raise FeatureAssemblyError("window length and stride must be >= 1")
    data = matrix.values if values is None else values
    if len(data) != len(matrix):
        raise FeatureAssemblyError("values length must match the matrix")
    if len(data) < T:
        raise FeatureAssemblyError(f"matrix has {len(data)} rows, needs >= {T}")
    view = sliding_window_view(data, (T, data.shape[1]))[:, 0]
    return WindowDataset(
        view[::stride],
        matrix.labels[T - 1 :: stride].copy(),
        matrix.timestamps[T - 1 :: stride].copy(),
    )


def pearson(x, y) -> float:
    """Pearson product-moment correlation of two equal-length series."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise UndefinedCorrelationError("series must be 1-D with equal lengths")
    if len(x) < 2:
        raise UndefinedCorrelationError("need at least 2 samples")
    if x.max() == x.min() or y.max() == y.min():
        raise UndefinedCorrelationError("zero-variance series")
    xc = x - x.mean()
    yc = y - y.mean()
    return float((xc @ yc) / np.sqrt((xc @ xc) * (yc @ yc)))


def correlation_matrix(values: np.ndarray | FeatureMatrix) -> np.ndarray:
    """Symmetric correlation matrix with unit diagonal.

    Zero-variance features are flagged by NaN in their whole row/column
    (diagonal included) rather than raising.
    """
    data = values.values if isinstance(values, FeatureMatrix) else np.asarray(values)
    if data.ndim != 2 or len(data) < 2:
        raise UndefinedCorrelationError("need a 2-D matrix with >= 2 rows")
    n_features = data.shape[1]
    defined = data.max(axis=0) != data.min(axis=0)
    centered = data - data.mean(axis=0)
    norms = np.sqrt((centered * centered).sum(axis=0))
    safe = np.where(defined, norms, 1.0)
    corr = (centered.T @ centered) / np.outer(safe, safe)
    corr[~defined, :] = np.nan
    corr[:, ~defined] = np.nan
    idx = np.arange(n_features)
    corr[idx[defined], idx[defined]] = 1.0
    return corr


def correlated_pairs(corr: np.ndarray, threshold: float = 0.7) -> set[tuple[int, int]]:
    """0-based (i, j) pairs, i < j, with defined |r| strictly above threshold."""
    pairs = set()
    n = corr.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            r = corr[i, j]
            if not np.isnan(r) and abs(r) > threshold:
                pairs.add((i, j))
    return pairs


# ---------------------------------------------------------------------------
# Feature CSV: timestamp,f1..fF,label
# ---------------------------------------------------------------------------

def features_header(n_features: int) -> str:
    cols = ",".join(f"f{i}" for i in range(1, n_features + 1))
    return f"timestamp,{cols},label"


def features_to_csv(matrix: FeatureMatrix) -> str:
    lines = [features_header(matrix.n_features)]
    for ts, row, label in zip(matrix.timestamps, matrix.values, matrix.labels):
        vals = ",".join(repr(float(v)) for v in row)
        lines.append(f"{ts:.6f},{vals},{int(label)}")
    return "\n".join(lines) + "\n"


def features_from_csv(text: str) -> FeatureMatrix:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FeatureAssemblyError("empty features CSV")
    header_cols = lines[0].split(",")
    if header_cols[0] != "timestamp" or header_cols[-1] != "label":
        raise FeatureAssemblyError("bad features CSV header")
    n_features = len(header_cols) - 2
    ts, rows, labels = [], [], []
    for ln in lines[1:]:
        cols = ln.split(",")
        if len(cols) != n_features + 2:
            raise FeatureAssemblyError(
                f"features row has {len(cols)} columns, expected {n_features + 2}"
            )
        ts.append(float(cols[0]))
        rows.append([float(c) for c in cols[1:-1]])
        labels.append(int(cols[-1]))
    return FeatureMatrix(
        np.asarray(ts), np.asarray(rows), np.asarray(labels, dtype=np.int8)
    )


def save_features(path, matrix: FeatureMatrix) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(features_to_csv(matrix))


def load_features(path) -> FeatureMatrix:
    with open(path, "r", encoding="ascii") as fh:
        return features_from_csv(fh.read())
