"""Attack synthesis tests: sigma estimation, sampling, injection, planning."""

import numpy as np
import pytest

from cansentry.attack import (
    AttackPlan,
    AttackWindow,
    default_plan,
    default_scenarios,
    estimate_sigma,
    expected_labels,
    inject,
    labels_from_csv,
    labels_to_csv,
    margin_floor,
    plan_from_csv,
    plan_to_csv,
    sample_false_value,
)
from cansentry.codec import RawFrame, Trace, decode_signal, default_catalog, write_log
from cansentry.errors import InjectionInfeasibleError, PlanError, ToolkitError
from cansentry.tracegen import TraceGenConfig, gen_trace

CATALOG = default_catalog()
SCENARIOS = default_scenarios(CATALOG)


@pytest.fixture(scope="module")
def trace60():
    return gen_trace(TraceGenConfig(duration_s=70.0, seed=11), CATALOG)


@pytest.fixture(scope="module")
def sigma60(trace60):
    return estimate_sigma(trace60, CATALOG)


def make_trace(raws, spec, dt=0.01):
    """Tiny single-message trace carrying the given raw values."""
    from cansentry.codec import patch_bytes

    frames = []
    for k, raw in enumerate(raws):
        f = RawFrame(spec.message_id, 8, bytes(8), k * dt)
        frames.append(patch_bytes(f, spec, raw))
    return Trace(frames)


class TestScenarios:
    def test_eleven_scenarios(self):
        assert len(SCENARIOS) == 11
        assert [s.scenario_id for s in SCENARIOS] == list(range(1, 12))

    def test_affected_bytes_match_catalog_fields(self):
        # 1-based byte positions, as printed in the attacked-bytes table
        printed = {1: (2,), 2: (3, 4), 3: (6,), 4: (7,), 5: (6,), 6: (7,),
                   7: (4,), 8: (1,), 9: (2,), 10: (3,), 11: (6,)}
        for sc in SCENARIOS:
            one_based = tuple(b + 1 for b in sc.affected_bytes)
            assert one_based == printed[sc.scenario_id], sc
            spec = CATALOG.by_name(sc.qualified_signal)
            first, last = spec.byte_span()
            assert sc.affected_bytes == tuple(range(first, last + 1))

    def test_only_engine_messages_attacked(self):
        assert {s.message_name for s in SCENARIOS} == {"EMS11", "EMS12", "EMS14", "EMS16"}


class TestEstimateSigma:
    def test_constant_signal_gets_scale_floor(self):
        spec = CATALOG.by_name("TPS")
        catalog_one = CATALOG
        trace = gen_trace(TraceGenConfig(duration_s=1.0, seed=0), catalog_one)
        # overwrite TPS field with a constant on every EMS12 frame
        from cansentry.codec import patch_bytes

        frames = [
            patch_bytes(f, spec, 100) if f.can_id == spec.message_id else f
            for f in trace
        ]
        sigma = estimate_sigma(Trace(frames), CATALOG)
        assert sigma["EMS12.TPS"] == spec.scale

    def test_alternating_series_closed_form(self):
        # raw 0/1 alternating with scale 1: sample stddev = sqrt(n/(n-1)) * 0.5
        spec = CATALOG.by_name("VS")
        trace = make_trace([0, 1] * 50, spec)
        vals = np.array([decode_signal(f, spec) for f in trace])
        n = len(vals)
        expected = 0.5 * np.sqrt(n / (n - 1))
        assert np.isclose(np.std(vals, ddof=1), expected, atol=1e-12)

    def test_requires_two_frames_per_message(self):
        spec = CATALOG.by_name("TPS")
        trace = make_trace([1, 2, 3], spec)  # EMS12 only
        with pytest.raises(ToolkitError, match="EMS11"):
            estimate_sigma(trace, CATALOG)

    def test_empty_trace_rejected(self):
        with pytest.raises(ToolkitError, match="empty"):
            estimate_sigma(Trace([]), CATALOG)

    def test_values_positive(self, sigma60):
        assert all(v > 0 for v in sigma60.values())


class TestSampleFalseValue:
    def test_one_sided_at_max(self):
        spec = CATALOG.by_name("VS")
        rng = np.random.default_rng(0)
        lo_q, hi_q = spec.scaled_bounds_achievable()
        for _ in range(100):
            v = sample_false_value(hi_q, 5.0, spec, rng)
            assert v <= hi_q - 15.0

    def test_band_excluded_rejection_oracle(self):
        # range [0, 254], original 50, sigma 1: never inside (47, 53)
        spec = CATALOG.by_name("VS")
        rng = np.random.default_rng(1)
        draws = np.array([sample_false_value(50.0, 1.0, spec, rng) for _ in range(10_000)])
        assert np.all((draws <= 47.0) | (draws >= 53.0))
        assert np.all(draws >= 0.0)
        assert np.all(draws <= 254.0)
        # both sides actually get sampled
        assert (draws < 47.0).any() and (draws > 53.0).any()

    def test_infeasible_band_raises(self):
        spec = CATALOG.by_name("VS")
        rng = np.random.default_rng(2)
        with pytest.raises(InjectionInfeasibleError, match="VS"):
            sample_false_value(127.0, 50.0, spec, rng)  # 6*sigma > range

    def test_nonpositive_sigma_rejected(self):
        spec = CATALOG.by_name("VS")
        rng = np.random.default_rng(3)
        with pytest.raises(InjectionInfeasibleError):
            sample_false_value(50.0, 0.0, spec, rng)


class TestInject:
    def test_empty_plan_is_identity(self, trace60, sigma60):
        plan = AttackPlan(windows=[], sigma_by_signal=sigma60)
        labeled = inject(trace60, plan, CATALOG)
        assert labeled.frames.frames == trace60.frames
        assert labeled.labels.sum() == 0
        assert labeled.provenance == {}

    def test_window_frame_count_and_purity(self, trace60, sigma60):
        # one 10 s window on EMS12/TPS in a 100 Hz trace: exactly 1000 frames hit
        plan = AttackPlan(
            windows=[AttackWindow(5, 20.0, 10.0)], sigma_by_signal=sigma60, seed=9
        )
        labeled = inject(trace60, plan, CATALOG)
        assert labeled.labels.sum() == 1000
        tps = CATALOG.by_name("TPS")
        first, last = tps.byte_span()
        for idx in labeled.provenance:
            original = labeled.provenance[idx]
            mutated = labeled.frames[idx].data
            xor = bytes(a ^ b for a, b in zip(original, mutated))
            assert any(xor[first : last + 1])
            assert not any(xor[:first]) and not any(xor[last + 1 :])
            assert labeled.frames[idx].can_id == 809

    def test_margin_property(self, trace60, sigma60):
        plan = default_plan(trace60, split_s=45.0, seed=5, catalog=CATALOG,
                            sigma_by_signal=sigma60)
        labeled = inject(trace60, plan, CATALOG)
        by_id = {s.scenario_id: s for s in SCENARIOS}
        checked = 0
        for idx, original_data in labeled.provenance.items():
            sc = by_id[int(labeled.scenario_ids[idx])]
            spec = CATALOG.by_name(sc.qualified_signal)
            frame = labeled.frames[idx]
            original = decode_signal(
                RawFrame(frame.can_id, frame.dlc, original_data, frame.timestamp), spec
            )
            injected = decode_signal(frame, spec)
            floor = margin_floor(sigma60[sc.qualified_signal], spec)
            assert abs(injected - original) >= floor - 1e-9
            assert spec.min_value - 1e-9 <= injected <= spec.max_value + 1e-9
            checked += 1
        assert checked == labeled.labels.sum()

    def test_label_soundness_independent_recomputation(self, trace60, sigma60):
        plan = default_plan(trace60, split_s=45.0, seed=6, catalog=CATALOG,
                            sigma_by_signal=sigma60)
        labeled = inject(trace60, plan, CATALOG)
        independent = expected_labels(trace60, plan, SCENARIOS)
        assert np.array_equal(labeled.labels, independent)

    def test_reversibility(self, trace60, sigma60):
        plan = default_plan(trace60, split_s=45.0, seed=7, catalog=CATALOG,
                            sigma_by_signal=sigma60)
        labeled = inject(trace60, plan, CATALOG)
        assert labeled.labels.sum() > 0
        restored = labeled.restore_original()
        assert write_log(restored) == write_log(trace60)

    def test_determinism(self, trace60, sigma60):
        plan = default_plan(trace60, split_s=45.0, seed=8, catalog=CATALOG,
                            sigma_by_signal=sigma60)
        a = inject(trace60, plan, CATALOG)
        b = inject(trace60, plan, CATALOG)
        assert write_log(a.frames) == write_log(b.frames)

    def test_missing_sigma_rejected(self, trace60):
        plan = AttackPlan(windows=[AttackWindow(5, 10.0, 5.0)])
        with pytest.raises(PlanError, match="sigma"):
            inject(trace60, plan, CATALOG)

    def test_unknown_scenario_rejected(self, trace60, sigma60):
        plan = AttackPlan(windows=[AttackWindow(99, 10.0, 5.0)], sigma_by_signal=sigma60)
        with pytest.raises(PlanError, match="unknown scenario"):
            inject(trace60, plan, CATALOG)


class TestDefaultPlan:
    def test_full_plan_shape(self):
        trace = gen_trace(TraceGenConfig(duration_s=537.0, seed=3), CATALOG)
        plan = default_plan(trace, split_s=350.0, seed=1, catalog=CATALOG)
        assert len(plan.windows) == 22
        train = [w for w in plan.windows if w.start_s < 350.0]
        test = [w for w in plan.windows if w.start_s >= 350.0]
        assert len(train) == 11 and all(w.duration_s == 10.0 for w in train)
        assert len(test) == 11 and all(w.duration_s == 5.0 for w in test)
        assert sorted(w.scenario_id for w in train) == list(range(1, 12))
        assert sorted(w.scenario_id for w in test) == list(range(1, 12))

    def test_windows_do_not_cross_split(self):
        trace = gen_trace(TraceGenConfig(duration_s=120.0, seed=3), CATALOG)
        plan = default_plan(trace, split_s=80.0, seed=2, catalog=CATALOG)
        for w in plan.windows:
            assert w.end_s <= 80.0 + 1e-9 or w.start_s >= 80.0

    def test_determinism(self, trace60):
        a = default_plan(trace60, split_s=45.0, seed=4, catalog=CATALOG)
        b = default_plan(trace60, split_s=45.0, seed=4, catalog=CATALOG)
        assert a.windows == b.windows

    def test_too_short_trace_rejected(self):
        trace = gen_trace(TraceGenConfig(duration_s=20.0, seed=3), CATALOG)
        with pytest.raises(PlanError, match="cannot fit"):
            default_plan(trace, split_s=10.0, seed=1, catalog=CATALOG)

    def test_split_outside_duration_rejected(self, trace60):
        with pytest.raises(PlanError, match="split"):
            default_plan(trace60, split_s=120.0, seed=1, catalog=CATALOG)


class TestPlanCsv:
    def test_roundtrip(self, trace60, sigma60):
        plan = default_plan(trace60, split_s=45.0, seed=5, catalog=CATALOG)
        plan.sigma_by_signal["EMS12.TPS"] = 0.03
        text = plan_to_csv(plan, SCENARIOS)
        again = plan_from_csv(text, SCENARIOS, seed=plan.seed)
        assert [(w.scenario_id, round(w.start_s, 6), w.duration_s) for w in again.windows] == [
            (w.scenario_id, round(w.start_s, 6), w.duration_s) for w in plan.windows
        ]
        assert again.sigma_by_signal == {"EMS12.TPS": 0.03}

    def test_sigma_override_used_by_inject(self, trace60, sigma60):
        # explicit override sigma accepted (e.g. published example sigma=0.03)
        sigma = dict(sigma60)
        sigma["EMS12.TPS"] = 0.03
        plan = AttackPlan(windows=[AttackWindow(5, 20.0, 1.0)], sigma_by_signal=sigma, seed=1)
        labeled = inject(trace60, plan, CATALOG)
        spec = CATALOG.by_name("TPS")
        for idx, original_data in labeled.provenance.items():
            frame = labeled.frames[idx]
            original = decode_signal(
                RawFrame(frame.can_id, frame.dlc, original_data, frame.timestamp), spec
            )
            injected = decode_signal(frame, spec)
            assert abs(injected - original) >= 3 * 0.03 - spec.scale / 2 - 1e-9

    def test_bad_header(self):
        with pytest.raises(PlanError, match="header"):
            plan_from_csv("nope\n", SCENARIOS)


class TestLabelsCsv:
    def test_roundtrip(self, trace60, sigma60):
        plan = default_plan(trace60, split_s=45.0, seed=5, catalog=CATALOG,
                            sigma_by_signal=sigma60)
        labeled = inject(trace60, plan, CATALOG)
        text = labels_to_csv(labeled)
        labels, scenario_ids = labels_from_csv(text, len(labeled.frames))
        assert np.array_equal(labels, labeled.labels)
        assert np.array_equal(scenario_ids, labeled.scenario_ids)

    def test_row_count_mismatch_rejected(self):
        with pytest.raises(PlanError, match="frame count"):
            labels_from_csv("line_no,label,scenario_id\n1,0,\n", 5)
