"""False-information attack synthesis.

Turns an attack-free trace into a labeled attack trace: during each planned
window, every frame of the targeted message gets its scenario signal
rewritten with a fresh value drawn at least three standard deviations away
from the original, clipped to the catalog range. Only the signal's own bits
change; per-frame provenance allows a bit-exact undo.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .codec import (
    MESSAGE_ORDER,
    SignalCatalog,
    SignalSpec,
    Trace,
    decode_signal,
    encode_signal,
    patch_bytes,
)
from .errors import InjectionInfeasibleError, PlanError, ToolkitError

# The eleven misbehavior scenarios: which signal of which message is falsified.
SCENARIO_TABLE = (
    (1, "EMS11", "TQI_ACOR"),
    (2, "EMS11", "N"),
    (3, "EMS11", "TQFR"),
    (4, "EMS11", "VS"),
    (5, "EMS12", "TPS"),
    (6, "EMS12", "PV_AV_CAN"),
    (7, "EMS14", "VB"),
    (8, "EMS16", "TQI_MIN"),
    (9, "EMS16", "TQI"),
    (10, "EMS16", "TQI_TARGET"),
    (11, "EMS16", "TQI_MAX"),
)

TRAIN_WINDOW_S = 10.0
TEST_WINDOW_S = 5.0


@dataclass(frozen=True)
class AttackScenario:
    scenario_id: int
    message_name: str
    message_id: int
    signal_name: str
    affected_bytes: tuple[int, ...]  # 0-based payload byte indices

    @property
    def qualified_signal(self) -> str:
        return f"{self.message_name}.{self.signal_name}"


def default_scenarios(catalog: SignalCatalog) -> list[AttackScenario]:
    """Build the scenario set from the catalog's bit ranges."""
    scenarios = []
    for sid, msg, sig in SCENARIO_TABLE:
        spec = catalog.by_name(f"{msg}.{sig}")
        first, last = spec.byte_span()
        scenarios.append(
            AttackScenario(sid, msg, spec.message_id, sig, tuple(range(first, last + 1)))
        )
    return scenarios


@dataclass(frozen=True)
class AttackWindow:
    scenario_id: int
    start_s: float
    duration_s: float

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s

    def contains(self, ts: float) -> bool:
        return self.start_s <= ts < self.end_s


@dataclass
class AttackPlan:
    windows: list[AttackWindow] = field(default_factory=list)
    sigma_by_signal: dict[str, float] = field(default_factory=dict)
    seed: int = 42

    def validate(self, scenarios: list[AttackScenario], trace_duration: float) -> None:
        by_id = {s.scenario_id: s for s in scenarios}
        per_message: dict[str, list[AttackWindow]] = {}
        for w in self.windows:
            if w.scenario_id not in by_id:
                raise PlanError(f"window references unknown scenario {w.scenario_id}")
            if w.duration_s <= 0:
                raise PlanError(f"scenario {w.scenario_id}: non-positive window duration")
            if w.start_s < 0 or w.end_s > trace_duration + 1e-9:
                raise PlanError(
                    f"scenario {w.scenario_id}: window [{w.start_s}, {w.end_s}) "
                    f"outside trace duration {trace_duration}"
                )
            per_message.setdefault(by_id[w.scenario_id].message_name, []).append(w)
        for msg, wins in per_message.items():
            wins = sorted(wins, key=lambda w: w.start_s)
            for a, b in zip(wins, wins[1:]):
                if b.start_s < a.end_s - 1e-9:
                    raise PlanError(f"{msg}: overlapping attack windows")


@dataclass
class LabeledTrace:
    """Attack trace plus per-frame labels and undo information."""

    frames: Trace
    labels: np.ndarray  # int8, 1 = attacked frame
    scenario_ids: np.ndarray  # int16, 0 where unattacked
    provenance: dict[int, bytes] = field(default_factory=dict)  # frame idx -> original payload

    def __post_init__(self):
        if len(self.labels) != len(self.frames):
            raise ToolkitError("labels length must match frame count")

    def restore_original(self) -> Trace:
        """Undo every injection bit-exactly using stored provenance."""
        frames = list(self.frames.frames)
        for idx, original in self.provenance.items():
            frames[idx] = replace(frames[idx], data=original)
        return Trace(frames)


def estimate_sigma(trace: Trace, catalog: SignalCatalog) -> dict[str, float]:
    """Per-signal sample standard deviation over an attack-free trace.

    Constant signals get one scale step instead of zero, so the 3-sigma rule
    stays meaningful. Requires at least two frames of every monitored message.
    """
    if len(trace) == 0:
        raise ToolkitError("cannot estimate sigma from an empty trace")
    values: dict[str, list[float]] = {s.qualified_name: [] for s in catalog}
    for f in trace:
        for spec in catalog.specs_for_message(f.can_id):
            values[spec.qualified_name].append(decode_signal(f, spec, catalog.bit_numbering))
    sigma = {}
    for spec in catalog:
        series = values[spec.qualified_name]
        if len(series) < 2:
            raise ToolkitError(
                f"{spec.qualified_name}: need >= 2 frames of {spec.message_name}"
            )
        arr = np.asarray(series)
        if arr.max() == arr.min():  # constant signal: floor at one scale step
            sigma[spec.qualified_name] = spec.scale
        else:
            sigma[spec.qualified_name] = float(np.std(arr, ddof=1))
    return sigma


def sample_false_value(
    original: float, sigma: float, spec: SignalSpec, rng: np.random.Generator
) -> float:
    """Draw uniformly from the in-range values at least 3 sigma from original.

    The interval endpoints are the quantization-achievable bounds (at most one
    scale step inside the catalog range), so the encoded result still honors
    both the range and, to within scale/2, the margin.
    """
    if sigma <= 0:
        raise InjectionInfeasibleError(spec.qualified_name, f"sigma {sigma} must be positive")
    lo_q, hi_q = spec.scaled_bounds_achievable()
    band = 3.0 * sigma
    lower_len = max(0.0, (original - band) - lo_q)
    upper_len = max(0.0, hi_q - (original + band))
    lower_ok = original - band >= lo_q
    upper_ok = original + band <= hi_q
    if not lower_ok and not upper_ok:
        raise InjectionInfeasibleError(
            spec.qualified_name,
            f"3-sigma band around {original} (sigma={sigma}) covers [{lo_q}, {hi_q}]",
        )
    total = (lower_len if lower_ok else 0.0) + (upper_len if upper_ok else 0.0)
    if total == 0.0:
        return original - band if lower_ok else original + band
    u = rng.uniform(0.0, total)
    if lower_ok and u <= lower_len:
        return lo_q + u
    if lower_ok:
        u -= lower_len
    return original + band + u


def inject(
    trace: Trace,
    plan: AttackPlan,
    catalog: SignalCatalog,
    scenarios: list[AttackScenario] | None = None,
) -> LabeledTrace:
    """Apply the plan to an attack-free trace.

    Every frame of an attacked message inside a window has its scenario
    signal rewritten; all other frames and all other bits are untouched.
    Deterministic under plan.seed.
    """
    if scenarios is None:
        scenarios = default_scenarios(catalog)
    plan.validate(scenarios, trace.duration)
    by_id = {s.scenario_id: s for s in scenarios}
    windows_by_message: dict[int, list[tuple[AttackWindow, AttackScenario]]] = {}
    for w in sorted(plan.windows, key=lambda w: (w.start_s, w.scenario_id)):
        sc = by_id[w.scenario_id]
        windows_by_message.setdefault(sc.message_id, []).append((w, sc))

    rng = np.random.default_rng(plan.seed)
    frames = list(trace.frames)
    labels = np.zeros(len(frames), dtype=np.int8)
    scenario_ids = np.zeros(len(frames), dtype=np.int16)
    provenance: dict[int, bytes] = {}
    for idx, frame in enumerate(frames):
        for window, scenario in windows_by_message.get(frame.can_id, ()):
            if not window.contains(frame.timestamp):
                continue
            spec = catalog.by_name(scenario.qualified_signal)
            sigma = plan.sigma_by_signal.get(scenario.qualified_signal)
            if sigma is None:
                raise PlanError(
                    f"no sigma available for {scenario.qualified_signal}; "
                    "estimate or override it in the plan"
                )
            original = decode_signal(frame, spec, catalog.bit_numbering)
            false_value = sample_false_value(original, sigma, spec, rng)
            patched = patch_bytes(frame, spec, encode_signal(false_value, spec),
                                  catalog.bit_numbering)
            provenance[idx] = frame.data
            frames[idx] = patched
            labels[idx] = 1
            scenario_ids[idx] = scenario.scenario_id
            break  # same-message windows are disjoint; one hit at most
    return LabeledTrace(Trace(frames), labels, scenario_ids, provenance)


def expected_labels(
    trace: Trace, plan: AttackPlan, scenarios: list[AttackScenario]
) -> np.ndarray:
    """Labels recomputed purely from window membership (for cross-checks)."""
    by_id = {s.scenario_id: s for s in scenarios}
    labels = np.zeros(len(trace), dtype=np.int8)
    for idx, frame in enumerate(trace):
        for w in plan.windows:
            sc = by_id[w.scenario_id]
            if frame.can_id == sc.message_id and w.contains(frame.timestamp):
                labels[idx] = 1
                break
    return labels


def default_plan(
    trace: Trace,
    split_s: float,
    seed: int,
    scenarios: list[AttackScenario] | None = None,
    catalog: SignalCatalog | None = None,
    train_window_s: float = TRAIN_WINDOW_S,
    test_window_s: float = TEST_WINDOW_S,
    sigma_by_signal: dict[str, float] | None = None,
) -> AttackPlan:
    """One train-region and one test-region window per scenario.

    Windows are placed uniformly at random without same-message overlap,
    deterministically under the seed. Train windows are 10 s, test windows
    5 s by default.
    """
    if scenarios is None:
        if catalog is None:
            raise PlanError("default_plan needs scenarios or a catalog")
        scenarios = default_scenarios(catalog)
    duration = trace.duration
    if not 0 < split_s < duration:
        raise PlanError(f"split {split_s} outside trace duration {duration}")
    rng = np.random.default_rng(seed)
    by_message: dict[str, list[AttackScenario]] = {}
    for sc in scenarios:
        by_message.setdefault(sc.message_name, []).append(sc)

    windows: list[AttackWindow] = []
    for region_start, region_end, win_len in (
        (0.0, split_s, train_window_s),
        (split_s, duration, test_window_s),
    ):
        for msg in sorted(by_message, key=lambda m: MESSAGE_ORDER.index(m) if m in MESSAGE_ORDER else 99):
            group = sorted(by_message[msg], key=lambda s: s.scenario_id)
            span = region_end - region_start
            slack = span - len(group) * win_len
            if slack < 0:
                raise PlanError(
                    f"{msg}: cannot fit {len(group)} disjoint {win_len} s windows "
                    f"in [{region_start}, {region_end})"
                )
            starts = np.sort(rng.uniform(0.0, slack, size=len(group)))
            for i, sc in enumerate(group):
                start = region_start + float(starts[i]) + i * win_len
                windows.append(AttackWindow(sc.scenario_id, start, win_len))
    plan = AttackPlan(windows=windows, sigma_by_signal=dict(sigma_by_signal or {}), seed=seed)
    plan.validate(scenarios, duration)
    return plan


# ---------------------------------------------------------------------------
# Plan CSV: scenario_id,start_s,duration_s,sigma_override
# Labels sidecar CSV: line_no,label,scenario_id (line_no is 1-based)
# ---------------------------------------------------------------------------

PLAN_HEADER = "scenario_id,start_s,duration_s,sigma_override"
LABELS_HEADER = "line_no,label,scenario_id"


def plan_to_csv(plan: AttackPlan, scenarios: list[AttackScenario]) -> str:
    by_id = {s.scenario_id: s for s in scenarios}
    lines = [PLAN_HEADER]
    for w in plan.windows:
        override = plan.sigma_by_signal.get(by_id[w.scenario_id].qualified_signal)
        col = "" if override is None else repr(override)
        lines.append(f"{w.scenario_id},{w.start_s:.6f},{w.duration_s:.6f},{col}")
    return "\n".join(lines) + "\n"


def plan_from_csv(text: str, scenarios: list[AttackScenario], seed: int = 42) -> AttackPlan:
    by_id = {s.scenario_id: s for s in scenarios}
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != PLAN_HEADER:
        raise PlanError("bad or missing plan CSV header")
    windows, sigma = [], {}
    for ln in lines[1:]:
        cols = ln.split(",")
        if len(cols) != 4:
            raise PlanError(f"plan row has {len(cols)} columns, expected 4")
        sid = int(cols[0])
        if sid not in by_id:
            raise PlanError(f"plan references unknown scenario {sid}")
        windows.append(AttackWindow(sid, float(cols[1]), float(cols[2])))
        if cols[3]:
            sigma[by_id[sid].qualified_signal] = float(cols[3])
    return AttackPlan(windows=windows, sigma_by_signal=sigma, seed=seed)


def labels_to_csv(labeled: LabeledTrace) -> str:
    lines = [LABELS_HEADER]
    for i, (lab, sid) in enumerate(zip(labeled.labels, labeled.scenario_ids), start=1):
        lines.append(f"{i},{int(lab)},{int(sid) if lab else ''}")
    return "\n".join(lines) + "\n"


def labels_from_csv(text: str, n_frames: int) -> tuple[np.ndarray, np.ndarray]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != LABELS_HEADER:
        raise PlanError("bad or missing labels CSV header")
    if len(lines) - 1 != n_frames:
        raise PlanError(f"labels rows ({len(lines) - 1}) != frame count ({n_frames})")
    labels = np.zeros(n_frames, dtype=np.int8)
    scenario_ids = np.zeros(n_frames, dtype=np.int16)
    for ln in lines[1:]:
        cols = ln.split(",")
        if len(cols) != 3:
            raise PlanError(f"labels row has {len(cols)} columns, expected 3")
        idx = int(cols[0]) - 1
        if not 0 <= idx < n_frames:
            raise PlanError(f"labels line_no {cols[0]} out of range")
        labels[idx] = int(cols[1])
        scenario_ids[idx] = int(cols[2]) if cols[2] else 0
    return labels, scenario_ids


def margin_floor(sigma: float, spec: SignalSpec) -> float:
    """Smallest |injected - original| the pipeline guarantees after encoding."""
    return 3.0 * sigma - spec.scale / 2.0
