"""Deterministic synthetic attack-free trace generation.

Each correlated feature group shares one mean-reverting latent process;
every feature adds a private latent on top, so designated pairs come out
strongly correlated (|r| around 0.9) while unrelated features stay near
zero. Latents are squashed into a band around each signal's range midpoint
so empirical signal deviations stay small relative to the catalog range,
leaving room for out-of-band injection later. The two counter-style
features are emitted as a modulo-16 frame counter mirrored into both
nibbles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .codec import (
    MESSAGE_DLC,
    MESSAGE_ORDER,
    MSB_FIRST,
    RawFrame,
    SignalCatalog,
    SignalSpec,
    Trace,
    scale_signal,
)
from .errors import ConfigError

# Signals wander either across most of their range or in a tight band around
# the midpoint. Coarse fields (<= 3 bits) need the wide swing to toggle
# levels at all; everything else stays tight so that 3-sigma injection is
# always feasible and injected values land far outside the normal band.
_WIDE_AMPLITUDE = 0.9
_TIGHT_AMPLITUDE = 0.08
_SHARED_WEIGHT = math.sqrt(0.9)
_PRIVATE_WEIGHT = math.sqrt(0.1)

COUNTER_SIGNALS = {"MSGCOUNT", "CHECKSUM"}
NEGATIVE_DEFAULT_SIGNAL = "TQFR"


@dataclass
class TraceGenConfig:
    """Knobs for the synthetic attack-free trace."""

    duration_s: float = 537.0
    frame_rate_hz: float = 100.0
    seed: int = 42
    # (feature_i, feature_j, sign) pairs the generator must realize.
    correlation_targets: list[tuple[int, int, int]] | None = None
    smoothness: float = 2.0

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")
        if self.frame_rate_hz <= 0:
            raise ConfigError("frame_rate_hz must be positive")
        if self.smoothness <= 0:
            raise ConfigError("smoothness must be positive")


def default_correlation_targets(catalog: SignalCatalog) -> list[tuple[int, int, int]]:
    """All catalog-designated pairs, negatively signed for the friction-torque
    signal against its partners (matching the observed correlation structure),
    positive otherwise."""
    negative_features = {
        s.feature_no for s in catalog if s.signal_name == NEGATIVE_DEFAULT_SIGNAL
    }
    targets = []
    for spec in catalog:
        for j in sorted(spec.correlated_with):
            if j <= spec.feature_no:
                continue  # emit each pair once
            negative = (spec.feature_no in negative_features) ^ (j in negative_features)
            targets.append((spec.feature_no, j, -1 if negative else 1))
    return targets


def _root_and_parity(parent, parity, x):
    p = 1
    while parent[x] != x:
        p *= parity[x]
        x = parent[x]
    return x, p


def _solve_signs(n_features: int, targets) -> dict[int, int]:
    """Assign each feature +/-1 so sign(i)*sign(j) matches every target.

    Union-find with edge parities; an inconsistent cycle (odd product of
    negative edges) raises ConfigError.
    """
    parent = {i: i for i in range(1, n_features + 1)}
    parity = {i: 1 for i in range(1, n_features + 1)}  # sign relative to parent
    for i, j, sign in targets:
        if sign not in (-1, 1):
            raise ConfigError(f"correlation target ({i},{j}): sign must be +/-1")
        if not (1 <= i <= n_features and 1 <= j <= n_features) or i == j:
            raise ConfigError(f"correlation target ({i},{j}) out of range")
        ri, pi = _root_and_parity(parent, parity, i)
        rj, pj = _root_and_parity(parent, parity, j)
        if ri == rj:
            if pi * pj != sign:
                raise ConfigError(f"correlation sign graph inconsistent at pair ({i},{j})")
        else:
            parent[rj] = ri
            parity[rj] = sign * pi * pj
    return {i: _root_and_parity(parent, parity, i)[1] for i in parent}


def _components(n_features: int, targets) -> list[set[int]]:
    adj = {i: set() for i in range(1, n_features + 1)}
    for i, j, _ in targets:
        adj[i].add(j)
        adj[j].add(i)
    seen, comps = set(), []
    for i in adj:
        if i in seen:
            continue
        stack, comp = [i], set()
        while stack:
            node = stack.pop()
            if node in comp:
                continue
            comp.add(node)
            stack.extend(adj[node] - comp)
        seen |= comp
        comps.append(comp)
    return comps


def _ou_series(rng: np.random.Generator, n: int, dt: float, tau: float) -> np.ndarray:
    """Unit-variance mean-reverting walk sampled at dt with time constant tau."""
    a = math.exp(-dt / tau)
    noise_scale = math.sqrt(1.0 - a * a)
    shocks = rng.standard_normal(n)
    out = np.empty(n)
    out[0] = shocks[0]
    for k in range(1, n):
        out[k] = a * out[k - 1] + noise_scale * shocks[k]
    return out


def _latent_to_raw(latent: np.ndarray, spec: SignalSpec) -> np.ndarray:
    """Map a unit-scale latent series onto in-range raw integers."""
    lo, hi = spec.scaled_bounds_achievable()
    center = 0.5 * (lo + hi)
    half_span = 0.5 * (hi - lo)
    amp = (_WIDE_AMPLITUDE if spec.bit_length <= 3 else _TIGHT_AMPLITUDE) * half_span
    scaled = center + amp * np.tanh(0.5 * latent)
    raw = np.floor((scaled - spec.offset) / spec.scale + 0.5).astype(np.int64)
    raw_lo, raw_hi = spec.raw_bounds_in_range()
    return np.clip(raw, raw_lo, raw_hi)


def gen_trace(config: TraceGenConfig, catalog: SignalCatalog) -> Trace:
    """Generate an interleaved attack-free trace for the monitored messages.

    One frame per monitored message per tick at frame_rate_hz; emissions are
    staggered inside each tick in fixed message order so interleaved
    timestamps are strictly increasing. Identical (config, catalog) inputs
    produce a bit-identical trace.
    """
    targets = config.correlation_targets
    if targets is None:
        targets = default_correlation_targets(catalog)
    n_features = len(catalog)
    signs = _solve_signs(n_features, targets)
    comps = _components(n_features, targets)

    n_ticks = int(round(config.duration_s * config.frame_rate_hz))
    if n_ticks < 2:
        raise ConfigError("duration too short for the configured frame rate")
    dt = 1.0 / config.frame_rate_hz

    rng = np.random.default_rng(config.seed)

    # Shared latent per multi-feature component (in component order), then one
    # private latent per feature (in feature order): a fixed draw sequence, so
    # the whole trace is reproducible from the seed.
    shared: dict[int, np.ndarray] = {}
    for comp in sorted(comps, key=min):
        if len(comp) > 1:
            series = _ou_series(rng, n_ticks, dt, config.smoothness)
            for i in comp:
                shared[i] = series
    raw_series: dict[int, np.ndarray] = {}
    counter = np.arange(n_ticks, dtype=np.int64) % 16
    for spec in catalog:
        if spec.signal_name in COUNTER_SIGNALS:
            raw_series[spec.feature_no] = counter
            continue
        private = _ou_series(rng, n_ticks, dt, config.smoothness)
        if spec.feature_no in shared:
            latent = _SHARED_WEIGHT * shared[spec.feature_no] + _PRIVATE_WEIGHT * private
        else:
            latent = private
        raw_series[spec.feature_no] = _latent_to_raw(signs[spec.feature_no] * latent, spec)

    # Compose each message's payload words vectorized, then interleave.
    known = [m for m in MESSAGE_ORDER if m in {s.message_name for s in catalog}]
    extra = sorted({s.message_name for s in catalog} - set(known))
    message_names = known + extra
    specs_by_message = {
        name: [s for s in catalog if s.message_name == name] for name in message_names
    }
    msb = catalog.bit_numbering == MSB_FIRST
    payloads: dict[str, bytes] = {}
    for name in message_names:
        words = np.zeros(n_ticks, dtype=np.uint64)
        for spec in specs_by_message[name]:
            shift = np.uint64(
                64 - spec.start_bit - spec.bit_length if msb else spec.start_bit
            )
            words |= raw_series[spec.feature_no].astype(np.uint64) << shift
        payloads[name] = words.astype(">u8" if msb else "<u8").tobytes()

    period_us = max(1, int(round(1_000_000 / config.frame_rate_hz)))
    stagger_us = max(1, period_us // (2 * len(message_names)))

    frames: list[RawFrame] = []
    for k in range(n_ticks):
        tick_us = k * period_us
        base = 8 * k
        for j, name in enumerate(message_names):
            ts = (tick_us + j * stagger_us) / 1e6
            frames.append(
                RawFrame(
                    specs_by_message[name][0].message_id,
                    MESSAGE_DLC,
                    payloads[name][base : base + 8],
                    ts,
                )
            )
    return Trace(frames)


def decoded_series(
    trace: Trace, spec: SignalSpec, bit_numbering: str = MSB_FIRST
) -> tuple[np.ndarray, np.ndarray]:
    """(timestamps, scaled values) of one signal across a trace."""
    mask = (1 << spec.bit_length) - 1
    if bit_numbering == MSB_FIRST:
        shift = 64 - spec.start_bit - spec.bit_length
        order = "big"
    else:
        shift = spec.start_bit
        order = "little"
    ts, vals = [], []
    for f in trace:
        if f.can_id == spec.message_id:
            word = int.from_bytes(f.data + b"\x00" * (8 - f.dlc), order)
            ts.append(f.timestamp)
            vals.append(scale_signal((word >> shift) & mask, spec))
    return np.asarray(ts), np.asarray(vals)
