"""Deterministic discrete-event simulation of the in-vehicle Ethernet fabric.

Topology: emitting ECUs send frames to a forwarding switch, which broadcasts
each frame to every other ECU. A malicious ECU can be attached; it mutates
frames matching an attack plan and re-injects them after a configurable
delay. The switch forwards everything regardless of content, so receivers
see both original and mutated frames.

Per hop, delivery takes base_ms plus uniform jitter; every frame crosses two
hops (sender -> switch -> receiver). Sequencing is fully deterministic under
the seed: events are totally ordered by (time, event type, insertion order),
and jitter draws are consumed in event order. When a detector is attached,
its per-inference wall-clock time is the only nondeterministic measurement
and is reported separately from the simulated communication latency.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackPlan, AttackScenario, default_scenarios, estimate_sigma, sample_false_value
from .codec import MSB_FIRST, RawFrame, SignalCatalog, Trace, decode_signal, encode_signal, patch_bytes
from .errors import SimError
from .features import Normalizer, message_decoders_for
from .lstm import LstmModel, forward
from .tracegen import TraceGenConfig, gen_trace

BRAKE_ECUS = ("ABS", "EPB", "ESC")
MALICIOUS_ECU = "MALICIOUS"

_EMIT, _SWITCH, _RECEIVE = 0, 1, 2
_EVENT_NAMES = {_EMIT: "emit", _SWITCH: "switch", _RECEIVE: "receive"}


def _default_emission_map() -> dict[str, tuple[str, ...]]:
    return {"EMS": ("EMS11", "EMS12", "EMS14", "EMS16"), "MDPS": ("SAS11",)}


@dataclass
class SimConfig:
    frame_rate_hz: float = 100.0
    duration_s: float = 10.0
    hop_base_ms: float = 2.9
    hop_jitter_ms: float = 0.2
    malicious_delay_ms: float = 0.5
    enable_malicious: bool = False
    seed: int = 42
    emission_map: dict[str, tuple[str, ...]] = field(default_factory=_default_emission_map)
    receive_only_ecus: tuple[str, ...] = BRAKE_ECUS

    def __post_init__(self):
        if self.frame_rate_hz <= 0 or self.duration_s <= 0:
            raise SimError("frame rate and duration must be positive")
        if self.hop_base_ms < 0 or self.hop_jitter_ms < 0 or self.malicious_delay_ms < 0:
            raise SimError("delays must be non-negative")

    @property
    def deadline_ms(self) -> float:
        return 1000.0 / self.frame_rate_hz

    def ecus(self) -> list[str]:
        out = list(self.emission_map) + list(self.receive_only_ecus)
        if self.enable_malicious:
            out.append(MALICIOUS_ECU)
        return out


@dataclass
class Detector:
    """Trained model plus the preprocessing it was fitted with."""

    model: LstmModel
    normalizer: Normalizer
    window: int = 10
    threshold: float = 0.5


@dataclass
class MessageStats:
    message: str
    sender: str
    emitted: int = 0
    mutated_emitted: int = 0
    received_by: dict[str, int] = field(default_factory=dict)
    latency_sum_ms: float = 0.0  # over brake-ECU receipts
    latency_count: int = 0
    max_latency_ms: float = 0.0

    @property
    def avg_latency_ms(self) -> float:
        return self.latency_sum_ms / self.latency_count if self.latency_count else 0.0


@dataclass
class SimReport:
    per_message: list[MessageStats]
    comp_latency_ms: float
    comp_latency_max_ms: float
    deadline_ms: float
    total_emitted: int
    total_received: int
    ecu_count: int
    detections: int = 0
    event_log: list[str] | None = None

    @property
    def overall_avg_latency_ms(self) -> float:
        total = sum(m.latency_sum_ms for m in self.per_message)
        count = sum(m.latency_count for m in self.per_message)
        return total / count if count else 0.0

    def total_latency_ms(self, stats: MessageStats) -> float:
        return stats.avg_latency_ms + self.comp_latency_ms


class _DetectorState:
    """Value-hold assembler plus rolling window driven by received frames."""

    def __init__(self, detector: Detector, catalog: SignalCatalog):
        self.detector = detector
        self.decoders = message_decoders_for(catalog)
        self.big_endian_word = catalog.bit_numbering == MSB_FIRST
        self.current = np.zeros(len(catalog))
        self.seen = np.zeros(len(catalog), dtype=bool)
        self.buffer = np.zeros((detector.window, len(catalog)))
        self.filled = 0
        self.samples_ms: list[float] = []
        self.detections = 0

    def observe(self, frame: RawFrame) -> None:
        decoders = self.decoders.get(frame.can_id)
        if decoders is None:
            return
        if self.big_endian_word:
            word = int.from_bytes(frame.data, "big") << (8 * (8 - frame.dlc))
        else:
            word = int.from_bytes(frame.data, "little")
        for col, shift, mask, scale, offset in decoders:
            self.current[col] = offset + scale * ((word >> shift) & mask)
            self.seen[col] = True
        if not self.seen.all():
            return
        row = self.detector.normalizer.transform(self.current[None, :])[0]
        self.buffer = np.roll(self.buffer, -1, axis=0)
        self.buffer[-1] = row
        if self.filled < self.detector.window:
            self.filled += 1
            if self.filled < self.detector.window:
                return
        started = time.perf_counter()
        p = forward(self.buffer, self.detector.model)
        elapsed_ms = (time.perf_counter() - started) * 1000.0
        self.samples_ms.append(elapsed_ms)
        if p >= self.detector.threshold:
            self.detections += 1


def run_sim(
    config: SimConfig,
    catalog: SignalCatalog,
    trace: Trace | None = None,
    detector: Detector | None = None,
    plan: AttackPlan | None = None,
    scenarios: list[AttackScenario] | None = None,
    keep_event_log: bool = False,
) -> SimReport:
    """Run the broadcast simulation and aggregate a latency report.

    Without a trace, one is synthesized at the configured rate and duration.
    With the malicious ECU enabled, a plan is required; sigma defaults to the
    trace's own per-signal estimate where the plan does not override it.
    """
    if trace is None:
        trace = gen_trace(
            TraceGenConfig(duration_s=config.duration_s,
                           frame_rate_hz=config.frame_rate_hz,
                           seed=config.seed),
            catalog,
        )
    message_sender = {}
    for ecu, messages in config.emission_map.items():
        for m in messages:
            message_sender[m] = ecu
    message_by_id = {s.message_id: s.message_name for s in catalog}
    specs_by_name = {s.message_name: s for s in catalog}

    sigma = None
    windows_by_message: dict[int, list[tuple]] = {}
    if config.enable_malicious:
        if plan is None:
            raise SimError("malicious ECU enabled but no attack plan supplied")
        if scenarios is None:
            scenarios = default_scenarios(catalog)
        plan.validate(scenarios, trace.duration)
        sigma = dict(estimate_sigma(trace, catalog))
        sigma.update(plan.sigma_by_signal)
        by_id = {s.scenario_id: s for s in scenarios}
        for w in sorted(plan.windows, key=lambda w: (w.start_s, w.scenario_id)):
            sc = by_id[w.scenario_id]
            windows_by_message.setdefault(sc.message_id, []).append((w, sc))

    rng = np.random.default_rng(config.seed)
    ecus = config.ecus()
    stats: dict[str, MessageStats] = {}
    state = _DetectorState(detector, catalog) if detector is not None else None
    log: list[str] | None = [] if keep_event_log else None

    def hop_delay() -> float:
        if config.hop_jitter_ms == 0:
            return config.hop_base_ms
        return config.hop_base_ms + rng.uniform(-config.hop_jitter_ms, config.hop_jitter_ms)

    heap: list[tuple] = []
    seq_counter = 0

    def push(time_ms, kind, payload):
        nonlocal seq_counter
        heapq.heappush(heap, (time_ms, kind, seq_counter, payload))
        seq_counter += 1

    emissions = 0
    receptions = 0
    frame_seq = 0
    for frame in trace:
        name = message_by_id.get(frame.can_id)
        if name is None or name not in message_sender:
            continue  # unmonitored id in a loaded log
        push(frame.timestamp * 1000.0, _EMIT,
             (frame, name, message_sender[name], frame_seq, False))
        frame_seq += 1

    while heap:
        now, kind, _, payload = heapq.heappop(heap)
        if kind == _EMIT:
            frame, name, sender, fseq, mutated = payload
            st = stats.setdefault(name, MessageStats(name, message_sender.get(name, sender)))
            st.emitted += 1
            if mutated:
                st.mutated_emitted += 1
            emissions += 1
            if log is not None:
                log.append(f"{now:.6f},emit,{sender},{name},{fseq}")
            push(now + hop_delay(), _SWITCH, (frame, name, sender, fseq, mutated, now))
        elif kind == _SWITCH:
            frame, name, sender, fseq, mutated, emit_time = payload
            if log is not None:
                log.append(f"{now:.6f},switch,SWITCH,{name},{fseq}")
            for receiver in ecus:
                if receiver == sender:
                    continue
                push(now + hop_delay(), _RECEIVE,
                     (frame, name, sender, fseq, mutated, emit_time, receiver))
        else:
            frame, name, sender, fseq, mutated, emit_time, receiver = payload
            receptions += 1
            latency = now - emit_time
            st = stats[name]
            st.received_by[receiver] = st.received_by.get(receiver, 0) + 1
            if receiver in BRAKE_ECUS:
                st.latency_sum_ms += latency
                st.latency_count += 1
                st.max_latency_ms = max(st.max_latency_ms, latency)
            if log is not None:
                log.append(f"{now:.6f},receive,{receiver},{name},{fseq}")
            if receiver == MALICIOUS_ECU and not mutated:
                hit = None
                for window, scenario in windows_by_message.get(frame.can_id, ()):
                    if window.contains(frame.timestamp):
                        hit = scenario
                        break
                if hit is not None:
                    spec = catalog.by_name(hit.qualified_signal)
                    original = decode_signal(frame, spec, catalog.bit_numbering)
                    false_value = sample_false_value(
                        original, sigma[hit.qualified_signal], spec, rng
                    )
                    forged = patch_bytes(frame, spec, encode_signal(false_value, spec),
                                         catalog.bit_numbering)
                    push(now + config.malicious_delay_ms, _EMIT,
                         (forged, name, MALICIOUS_ECU, frame_seq, True))
                    frame_seq += 1
            if state is not None and receiver == "ABS":
                state.observe(frame)

    comp_mean = comp_max = 0.0
    detections = 0
    if state is not None and state.samples_ms:
        samples = state.samples_ms[1:] if len(state.samples_ms) > 1 else state.samples_ms
        comp_mean = float(np.mean(samples))
        comp_max = float(np.max(state.samples_ms))
        detections = state.detections

    order = {m: k for k, m in enumerate(specs_by_name)}
    per_message = sorted(stats.values(), key=lambda s: order.get(s.message, 99))
    return SimReport(
        per_message=per_message,
        comp_latency_ms=comp_mean,
        comp_latency_max_ms=comp_max,
        deadline_ms=config.deadline_ms,
        total_emitted=emissions,
        total_received=receptions,
        ecu_count=len(ecus),
        detections=detections,
        event_log=log,
    )


@dataclass
class InferenceTiming:
    mean_ms: float
    max_ms: float
    reps: int
    low_rep: bool = False


def measure_inference(
    model: LstmModel, window: np.ndarray, reps: int = 50
) -> InferenceTiming:
    """Wall-clock statistics for repeated single-window inference.

    Runs reps identical forward passes; the first (warm-up) iteration is
    excluded from the mean. With reps == 1 the single sample is used and the
    result is flagged low_rep.
    """
    if reps < 1:
        raise SimError("reps must be >= 1")
    samples = []
    first_label = None
    for _ in range(reps):
        started = time.perf_counter()
        p = forward(window, model)
        samples.append((time.perf_counter() - started) * 1000.0)
        label = int(p >= 0.5)
        if first_label is None:
            first_label = label
        elif label != first_label:
            raise SimError("inference became nondeterministic across reps")
    if reps == 1:
        return InferenceTiming(samples[0], samples[0], reps, low_rep=True)
    return InferenceTiming(float(np.mean(samples[1:])), float(np.max(samples)), reps)


def check_deadline(report: SimReport, config: SimConfig) -> tuple[dict[str, bool], bool]:
    """Strict less-than deadline check per message and overall."""
    per_message = {
        m.message: report.total_latency_ms(m) < config.deadline_ms
        for m in report.per_message
    }
    return per_message, all(per_message.values()) and bool(per_message)


SIM_HEADER = "ecu,message,frames,avg_latency_ms,comp_latency_ms,total_latency_ms,deadline_ms,pass"
EVENT_LOG_HEADER = "time_ms,event,ecu,message,frame_seq"


def sim_report_to_csv(report: SimReport, config: SimConfig) -> str:
    per_message, overall = check_deadline(report, config)
    lines = [SIM_HEADER]
    for m in report.per_message:
        lines.append(
            f"{m.sender},{m.message},{m.emitted},{m.avg_latency_ms:.6f},"
            f"{report.comp_latency_ms:.6f},{report.total_latency_ms(m):.6f},"
            f"{report.deadline_ms:.1f},{'yes' if per_message[m.message] else 'no'}"
        )
    total = report.overall_avg_latency_ms + report.comp_latency_ms
    lines.append(
        f"Overall,-,{report.total_emitted},{report.overall_avg_latency_ms:.6f},"
        f"{report.comp_latency_ms:.6f},{total:.6f},{report.deadline_ms:.1f},"
        f"{'yes' if overall else 'no'}"
    )
    return "\n".join(lines) + "\n"


def event_log_to_csv(report: SimReport) -> str:
    if report.event_log is None:
        raise SimError("simulation ran without event logging")
    return EVENT_LOG_HEADER + "\n" + "\n".join(report.event_log) + "\n"
