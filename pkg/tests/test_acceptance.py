"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -rP` to see the per-criterion
lines. The two long criteria (desk-scale end-to-end, full-grid sweep) train
real models and take several minutes each.
"""

import math
import time

import numpy as np
import pytest

from cansentry.attack import default_plan, default_scenarios, estimate_sigma, inject
from cansentry.codec import (
    RawFrame,
    decode_signal,
    default_catalog,
    encode_signal,
    extract_raw,
    patch_bytes,
    scale_signal,
)
from cansentry.evaluate import (
    ConfusionCounts,
    confusion,
    full_grid,
    metrics,
    sweep,
    sweep_to_csv,
    SweepGrid,
)
from cansentry.features import assemble, correlation_matrix, fit_normalizer, pearson
from cansentry.lstm import (
    TrainConfig,
    backward,
    bce_loss,
    forward_batch,
    init_model,
)
from cansentry.netsim import (
    MessageStats,
    SimConfig,
    SimReport,
    check_deadline,
    event_log_to_csv,
    measure_inference,
    run_sim,
)
from cansentry.pipeline import PipelineConfig, region_windows, run_pipeline
from cansentry.report import heatmap_svg
from cansentry.tracegen import TraceGenConfig, decoded_series, default_correlation_targets, gen_trace

CATALOG = default_catalog()


def report(num, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    tail = f" :: {detail}" if detail else ""
    print(f"[criterion {num:02d}] {status} {name}{tail}")
    assert ok, f"criterion {num} ({name}): {detail}"


def test_criterion_01_codec_exactness():
    started = time.perf_counter()
    failures = 0
    checked = 0
    base = {mid: RawFrame(mid, 8, bytes([0x5A] * 8), 0.0)
            for mid in CATALOG.monitored_messages}
    for spec in CATALOG:
        frame = base[spec.message_id]
        if spec.bit_length <= 8:
            values = range(spec.raw_max + 1)
        else:
            step = (spec.raw_max + 1) // 4096
            values = range(0, spec.raw_max + 1, step)
        for v in values:
            checked += 1
            if extract_raw(patch_bytes(frame, spec, v), spec) != v:
                failures += 1
            if encode_signal(scale_signal(v, spec), spec) != v:
                failures += 1
    elapsed = time.perf_counter() - started
    report(1, "codec exactness", failures == 0 and elapsed < 5.0,
           f"{checked} roundtrips, {failures} failures, {elapsed:.2f} s")


def test_criterion_02_gradient_fidelity():
    started = time.perf_counter()
    rng = np.random.default_rng(2024)
    model = init_model(TrainConfig(hidden_size=4, seed=7), 20, np.random.default_rng(7))
    inputs = rng.normal(size=(2, 3, 20))
    y = np.array([1.0, 0.0])
    _, cache = forward_batch(model, inputs, want_cache=True)
    grads = backward(model, cache, y)
    step = 1e-5
    worst = 0.0
    for name, param in model.params().items():
        flat = param.ravel()
        gflat = grads[name].ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            p_hi, _ = forward_batch(model, inputs)
            flat[idx] = orig - step
            p_lo, _ = forward_batch(model, inputs)
            flat[idx] = orig
            numeric = (bce_loss(y, p_hi) - bce_loss(y, p_lo)) / (2 * step)
            denom = max(abs(numeric) + abs(gflat[idx]), 1e-8)
            worst = max(worst, abs(numeric - gflat[idx]) / denom)
    elapsed = time.perf_counter() - started
    report(2, "gradient fidelity", worst < 1e-4 and elapsed < 10.0,
           f"max relative error {worst:.2e}, {elapsed:.2f} s")


def test_criterion_03_loss_oracle():
    value = bce_loss([1, 0], [0.5, 0.5])
    err = abs(value - math.log(2))
    report(3, "binary cross-entropy oracle", err < 1e-12,
           f"bce([1,0],[0.5,0.5]) = {value!r}, |err| = {err:.2e}")


def test_criterion_04_injection_margin():
    trace = gen_trace(TraceGenConfig(duration_s=537.0, seed=404), CATALOG)
    sigma = estimate_sigma(trace, CATALOG)
    plan = default_plan(trace, 350.0, seed=404, catalog=CATALOG, sigma_by_signal=sigma)
    scenarios = default_scenarios(CATALOG)
    labeled = inject(trace, plan, CATALOG, scenarios)
    by_id = {s.scenario_id: s for s in scenarios}
    injected = 0
    margin_violations = 0
    bound_violations = 0
    purity_violations = 0
    seen_scenarios = set()
    for idx, original_data in labeled.provenance.items():
        scenario = by_id[int(labeled.scenario_ids[idx])]
        seen_scenarios.add(scenario.scenario_id)
        spec = CATALOG.by_name(scenario.qualified_signal)
        frame = labeled.frames[idx]
        original_frame = RawFrame(frame.can_id, frame.dlc, original_data, frame.timestamp)
        original = decode_signal(original_frame, spec)
        value = decode_signal(frame, spec)
        injected += 1
        sig = sigma[scenario.qualified_signal]
        if abs(value - original) < 3.0 * sig - spec.scale / 2.0 - 1e-9:
            margin_violations += 1
        if not (spec.min_value - 1e-9 <= value <= spec.max_value + 1e-9):
            bound_violations += 1
        xor = bytes(a ^ b for a, b in zip(original_data, frame.data))
        lo, hi = spec.byte_span()
        if any(xor[:lo]) or any(xor[hi + 1:]) or not any(xor[lo:hi + 1]):
            purity_violations += 1
    ok = (
        injected >= 10_000
        and seen_scenarios == set(range(1, 12))
        and margin_violations == 0
        and bound_violations == 0
        and purity_violations == 0
    )
    report(4, "injection margin and purity", ok,
           f"{injected} injected frames, margin/bound/purity violations "
           f"{margin_violations}/{bound_violations}/{purity_violations}")


def _round_percent(x, decimals=0):
    scaled = x * 100 * 10**decimals
    return math.floor(scaled + 0.5) / 10**decimals


def test_criterion_05_metrics_oracle():
    rng = np.random.default_rng(505)
    exact = True
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        y = rng.integers(0, 2, size=n)
        p = rng.integers(0, 2, size=n)
        c = confusion(y, p)
        tp = sum(1 for a, b in zip(y, p) if a == 1 and b == 1)
        fp = sum(1 for a, b in zip(y, p) if a == 0 and b == 1)
        tn = sum(1 for a, b in zip(y, p) if a == 0 and b == 0)
        fn = sum(1 for a, b in zip(y, p) if a == 1 and b == 0)
        r = metrics(c)
        expected_acc = (tp + tn) / n
        if (c.tp, c.fp, c.tn, c.fn) != (tp, fp, tn, fn) or r.accuracy != expected_acc:
            exact = False

    # Confusion matrix consistent with the published best dropout-0.5 row:
    # accuracy 95, precision 95, recall 87 (percent), fpr 2.11 percent.
    anchor = metrics(ConfusionCounts(tp=173001, fp=10068, tn=467088, fn=26999))
    anchor_ok = (
        _round_percent(anchor.accuracy) == 95
        and _round_percent(anchor.precision) == 95
        and _round_percent(anchor.recall) == 87
        and _round_percent(anchor.fpr, 2) == 2.11
    )
    report(5, "metrics oracle and published anchor row", exact and anchor_ok,
           f"1000 random pairs exact={exact}; anchor acc/prec/rec/fpr = "
           f"{_round_percent(anchor.accuracy):.0f}/{_round_percent(anchor.precision):.0f}/"
           f"{_round_percent(anchor.recall):.0f}/{_round_percent(anchor.fpr, 2):.2f}")


def test_criterion_07_latency():
    model = init_model(TrainConfig(hidden_size=50, seed=7), 20, np.random.default_rng(7))
    window = np.random.default_rng(8).random((10, 20))
    timing = measure_inference(model, window, reps=50)

    config = SimConfig(duration_s=2.0, seed=7)
    trace = gen_trace(TraceGenConfig(duration_s=2.0, seed=7), CATALOG)
    matrix = assemble(trace, CATALOG)
    normalizer = fit_normalizer(matrix)
    from cansentry.netsim import Detector

    sim = run_sim(config, CATALOG, trace=trace,
                  detector=Detector(model, normalizer, window=10))
    combined = sim.overall_avg_latency_ms + sim.comp_latency_ms
    arithmetic_exact = all(
        sim.total_latency_ms(m) == m.avg_latency_ms + sim.comp_latency_ms
        for m in sim.per_message
    )

    boundary = SimReport(
        [MessageStats("EMS11", "EMS", emitted=1, latency_sum_ms=10.0,
                      latency_count=1, max_latency_ms=10.0)],
        comp_latency_ms=0.0, comp_latency_max_ms=0.0, deadline_ms=10.0,
        total_emitted=1, total_received=4, ecu_count=5,
    )
    _, boundary_pass = check_deadline(boundary, SimConfig())

    ok = (
        timing.mean_ms < 10.0
        and combined < 10.0
        and arithmetic_exact
        and boundary_pass is False
    )
    report(7, "latency budget", ok,
           f"inference mean {timing.mean_ms:.3f} ms, simulated combined "
           f"{combined:.3f} ms, strict boundary honored={not boundary_pass}")


def test_criterion_08_sim_conservation_determinism():
    started = time.perf_counter()
    config = SimConfig(duration_s=10.0, frame_rate_hz=100.0, seed=808)
    a = run_sim(config, CATALOG, keep_event_log=True)
    b = run_sim(config, CATALOG, keep_event_log=True)
    conserved = a.total_received == a.total_emitted * (a.ecu_count - 1)
    identical = event_log_to_csv(a) == event_log_to_csv(b)
    elapsed = time.perf_counter() - started
    report(8, "simulation conservation and determinism",
           conserved and identical and elapsed < 30.0,
           f"{a.total_emitted} emissions x {a.ecu_count - 1} receivers = "
           f"{a.total_received} receptions, identical logs={identical}, {elapsed:.1f} s")


def test_criterion_10_correlation():
    rng = np.random.default_rng(1010)
    max_err = 0.0
    for _ in range(20):
        data = rng.normal(size=(60, 8))
        corr = correlation_matrix(data)
        for i in range(8):
            for j in range(8):
                x, y = data[:, i], data[:, j]
                mx, my = x.mean(), y.mean()
                sxy = float(sum((a - mx) * (b - my) for a, b in zip(x, y)))
                sxx = float(sum((a - mx) ** 2 for a in x))
                syy = float(sum((b - my) ** 2 for b in y))
                max_err = max(max_err, abs(corr[i, j] - sxy / math.sqrt(sxx * syy)))

    trace = gen_trace(TraceGenConfig(duration_s=120.0, seed=1010), CATALOG)
    series = {s.feature_no: decoded_series(trace, s)[1] for s in CATALOG}
    n = min(len(v) for v in series.values())
    weakest = 1.0
    signed_ok = True
    for i, j, sign in default_correlation_targets(CATALOG):
        r = pearson(series[i][:n], series[j][:n])
        weakest = min(weakest, sign * r)
        if sign * r <= 0.7:
            signed_ok = False

    svg = heatmap_svg(correlation_matrix(np.column_stack([series[k][:n] for k in range(1, 21)])))
    cells = svg.count('<rect class="cell"')

    ok = max_err < 1e-12 and signed_ok and cells == 400
    report(10, "correlation oracle, designated pairs, heatmap", ok,
           f"max |pearson err| {max_err:.2e}, weakest signed pair r {weakest:.3f}, "
           f"{cells} SVG cells")


@pytest.mark.slow
def test_criterion_06_end_to_end_desk_analogue(tmp_path):
    started = time.perf_counter()
    config = PipelineConfig(
        out_dir=tmp_path / "desk",
        duration_s=300.0,
        split_s=200.0,
        train=TrainConfig(hidden_size=50, epochs=50, batch_size=128,
                          dropout_p=0.5, seed=42),
        sim=SimConfig(duration_s=5.0, seed=42),
    )
    result = run_pipeline(config)
    elapsed = time.perf_counter() - started
    r = result.metrics_report
    ok = (
        r.accuracy >= 0.90
        and r.recall is not None
        and r.recall >= 0.75
        and elapsed < 15 * 60
    )
    report(6, "end-to-end desk analogue", ok,
           f"accuracy {r.accuracy:.4f} (>=0.90), recall {r.recall:.4f} (>=0.75), "
           f"{elapsed / 60:.1f} min (<15)")


@pytest.mark.slow
def test_criterion_09_sweep_shape():
    started = time.perf_counter()
    trace = gen_trace(TraceGenConfig(duration_s=60.0, seed=909), CATALOG)
    sigma = estimate_sigma(trace, CATALOG)
    # 60 s leaves no room for the default 10 s/5 s windows and a 350/537
    # split, so this reduced-scale run shortens both.
    split = 25.0
    plan = default_plan(trace, split, seed=909, catalog=CATALOG,
                        sigma_by_signal=sigma, train_window_s=5.0, test_window_s=2.0)
    labeled = inject(trace, plan, CATALOG)
    matrix = assemble(labeled, CATALOG)
    train_matrix, _ = matrix.split_at(split)
    normalizer = fit_normalizer(train_matrix)
    train_set, test_set = region_windows(matrix, normalizer, split, 10)

    rows = sweep(
        np.asarray(train_set.inputs), train_set.labels,
        np.asarray(test_set.inputs), test_set.labels,
        full_grid(), seed=909, epochs_cap=50, workers=4,
    )
    csv_text = sweep_to_csv(rows)
    lines = csv_text.strip().splitlines()
    per_dropout = {0.0: 0, 0.5: 0}
    for r in rows:
        per_dropout[r.dropout_p] += 1
    layout_ok = (
        len(rows) == 48
        and len(lines) == 49
        and per_dropout == {0.0: 24, 0.5: 24}
        and [("%g" % r.dropout_p) for r in rows] == ["0"] * 24 + ["0.5"] * 24
        and all(r.error is None for r in rows)
    )

    # determinism under seed, demonstrated on a subgrid twice (the train_s
    # column is wall clock and excluded from the comparison)
    sub = SweepGrid(neurons=(50,), epochs=(50,), batches=(128, 512), dropouts=(0.0, 0.5))
    def strip_time(text):
        return ["," .join(line.split(",")[:-1]) for line in text.splitlines()]
    rerun_a = sweep_to_csv(sweep(np.asarray(train_set.inputs), train_set.labels,
                                 np.asarray(test_set.inputs), test_set.labels,
                                 sub, seed=909, epochs_cap=5))
    rerun_b = sweep_to_csv(sweep(np.asarray(train_set.inputs), train_set.labels,
                                 np.asarray(test_set.inputs), test_set.labels,
                                 sub, seed=909, epochs_cap=5))
    deterministic = strip_time(rerun_a) == strip_time(rerun_b)

    elapsed = time.perf_counter() - started
    ok = layout_ok and deterministic and elapsed < 30 * 60
    report(9, "sweep shape and determinism", ok,
           f"48 rows (24 per dropout)={layout_ok}, deterministic={deterministic}, "
           f"{elapsed / 60:.1f} min (<30)")
