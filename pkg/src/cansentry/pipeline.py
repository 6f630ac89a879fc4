"""End-to-end orchestration: trace -> attacks -> features -> model -> reports.

Owns the train/test time split. Train-region windows never contain rows at
or past the split and vice versa (windows that would straddle the boundary
are dropped entirely), and the normalizer is fitted on train-region rows
only. Every stage persists its artifacts before the next stage runs, so a
failing run leaves partial outputs behind for debugging; a manifest with
content hashes closes the run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import report as figures
from .attack import (
    default_plan,
    default_scenarios,
    estimate_sigma,
    inject,
    labels_to_csv,
    plan_to_csv,
)
from .codec import SignalCatalog, Trace, default_catalog, load_trace, save_trace
from .errors import PipelineError, ToolkitError
from .evaluate import (
    SweepRow,
    confusion,
    correlation_to_csv,
    desk_grid,
    full_grid,
    metrics,
    metrics_to_csv,
    sweep,
    sweep_to_csv,
)
from .features import (
    FeatureMatrix,
    Normalizer,
    WindowDataset,
    assemble,
    correlation_matrix,
    fit_normalizer,
    save_features,
    windows,
)
from .lstm import (
    LstmModel,
    TrainConfig,
    TrainHistory,
    predict_proba,
    save_checkpoint_file,
    train,
)
from .netsim import Detector, SimConfig, run_sim, sim_report_to_csv
from .tracegen import TraceGenConfig, decoded_series, gen_trace

TRAIN_FRACTION = 350.0 / 537.0

# Files whose bytes legitimately differ between reruns (wall-clock content).
VOLATILE_ARTIFACTS = {"sweep.csv", "history.csv", "sim_report.csv", "figures/latency.png"}


@dataclass
class PipelineConfig:
    out_dir: Path
    trace_path: Path | None = None  # load this log instead of synthesizing
    duration_s: float = 300.0
    frame_rate_hz: float = 100.0
    trace_seed: int = 42
    smoothness: float = 2.0
    split_s: float | None = None  # default: duration * 350/537
    attack_seed: int = 42
    sigma_overrides: dict[str, float] = field(default_factory=dict)
    window: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    run_sweep: bool = False
    sweep_grid: str = "desk"  # "desk" or "full"
    sweep_workers: int = 1
    sweep_epochs_cap: int | None = None

    def resolved_split(self, duration: float) -> float:
        split = self.split_s if self.split_s is not None else duration * TRAIN_FRACTION
        if not 0 < split < duration:
            raise PipelineError(
                "config", f"split {split} outside trace duration {duration}"
            )
        return split


@dataclass
class PipelineResult:
    out_dir: Path
    model: LstmModel
    history: TrainHistory
    metrics_report: object
    sim_report: object
    sweep_rows: list[SweepRow] | None
    split_s: float
    train_windows: int
    test_windows: int


def _stage(name):
    """Decorator-free stage guard: wrap ToolkitError into PipelineError."""

    class _Guard:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc_type is not None and issubclass(exc_type, ToolkitError) and not issubclass(
                exc_type, PipelineError
            ):
                raise PipelineError(name, str(exc)) from exc
            return False

    return _Guard()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(text)


def _config_echo(config: PipelineConfig, duration: float, split: float) -> str:
    lines = [
        "[trace]",
        f"source = {config.trace_path if config.trace_path else 'synthetic'}",
        f"duration_s = {duration:g}",
        f"frame_rate_hz = {config.frame_rate_hz:g}",
        f"seed = {config.trace_seed}",
        f"smoothness = {config.smoothness:g}",
        "",
        "[attack]",
        f"seed = {config.attack_seed}",
        *[f"sigma.{k} = {v!r}" for k, v in sorted(config.sigma_overrides.items())],
        "",
        "[features]",
        f"window = {config.window}",
        f"split_s = {split:g}",
        "",
        "[train]",
        f"neurons = {config.train.hidden_size}",
        f"epochs = {config.train.epochs}",
        f"batch = {config.train.batch_size}",
        f"dropout = {config.train.dropout_p:g}",
        f"learning_rate = {config.train.learning_rate:g}",
        f"seed = {config.train.seed}",
        "",
        "[sim]",
        f"duration_s = {config.sim.duration_s:g}",
        f"frame_rate_hz = {config.sim.frame_rate_hz:g}",
        f"hop_base_ms = {config.sim.hop_base_ms:g}",
        f"hop_jitter_ms = {config.sim.hop_jitter_ms:g}",
        f"seed = {config.sim.seed}",
        "",
        "[sweep]",
        f"enabled = {config.run_sweep}",
        f"grid = {config.sweep_grid}",
    ]
    return "\n".join(lines) + "\n"


def region_windows(
    matrix: FeatureMatrix, normalizer: Normalizer, split_s: float, T: int
) -> tuple[WindowDataset, WindowDataset]:
    """Per-region window sets; regions are contiguous so no window straddles."""
    train_matrix, test_matrix = matrix.split_at(split_s)
    if len(train_matrix) < T or len(test_matrix) < T:
        raise ToolkitError(
            f"need at least {T} rows on each side of the split "
            f"(got {len(train_matrix)}/{len(test_matrix)})"
        )
    train_set = windows(train_matrix, T, values=normalizer.transform(train_matrix.values))
    test_set = windows(test_matrix, T, values=normalizer.transform(test_matrix.values))
    return train_set, test_set


def run_pipeline(
    config: PipelineConfig,
    catalog: SignalCatalog | None = None,
    log=None,
) -> PipelineResult:
    """Execute every stage in order, persisting artifacts as they appear."""
    if catalog is None:
        catalog = default_catalog()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    say = log if log is not None else (lambda msg: None)

    with _stage("trace"):
        if config.trace_path is not None:
            trace = load_trace(config.trace_path)
        else:
            trace = gen_trace(
                TraceGenConfig(
                    duration_s=config.duration_s,
                    frame_rate_hz=config.frame_rate_hz,
                    seed=config.trace_seed,
                    smoothness=config.smoothness,
                ),
                catalog,
            )
        duration = trace.duration
        split_s = config.resolved_split(duration)
        _write(out / "config.txt", _config_echo(config, duration, split_s))
        say(f"trace: {len(trace)} frames over {duration:.3f} s")

    with _stage("plan"):
        sigma = estimate_sigma(trace, catalog)
        sigma.update(config.sigma_overrides)
        plan = default_plan(
            trace, split_s, config.attack_seed, catalog=catalog, sigma_by_signal=sigma
        )
        scenarios = default_scenarios(catalog)
        _write(out / "plan.csv", plan_to_csv(plan, scenarios))
        say(f"plan: {len(plan.windows)} attack windows")

    with _stage("inject"):
        labeled = inject(trace, plan, catalog, scenarios)
        save_trace(out / "trace.log", labeled.frames)
        _write(out / "labels.csv", labels_to_csv(labeled))
        say(f"inject: {int(labeled.labels.sum())} attacked frames")

    with _stage("features"):
        matrix = assemble(labeled, catalog)
        save_features(out / "features.csv", matrix)
        train_matrix, _ = matrix.split_at(split_s)
        if len(train_matrix) == 0:
            raise ToolkitError("no training rows before the split")
        normalizer = fit_normalizer(train_matrix)
        train_set, test_set = region_windows(matrix, normalizer, split_s, config.window)
        say(f"features: {len(matrix)} rows, {len(train_set)}/{len(test_set)} windows")

    with _stage("train"):
        model, history = train(np.asarray(train_set.inputs), train_set.labels, config.train)
        save_checkpoint_file(
            out / "model.ckpt", model, config.train, normalizer.mins, normalizer.maxs
        )
        history_lines = ["epoch,loss,seconds"] + [
            f"{k + 1},{loss!r},{sec:.3f}"
            for k, (loss, sec) in enumerate(zip(history.epoch_losses, history.epoch_seconds))
        ]
        _write(out / "history.csv", "\n".join(history_lines) + "\n")
        if history.epoch_losses:
            figures.save_loss_plot(out / "figures" / "loss.png", history.epoch_losses)
        say(f"train: {config.train.epochs} epochs, "
            f"final loss {history.epoch_losses[-1] if history.epoch_losses else float('nan'):.4f}")

    with _stage("eval"):
        preds = (predict_proba(model, np.asarray(test_set.inputs))
                 >= config.train.threshold).astype(np.int8)
        metrics_report = metrics(confusion(test_set.labels, preds))
        _write(out / "metrics.csv", metrics_to_csv(metrics_report))
        say(f"eval: accuracy {metrics_report.accuracy:.4f}")

    sweep_rows = None
    if config.run_sweep:
        with _stage("sweep"):
            grid = full_grid() if config.sweep_grid == "full" else desk_grid()
            sweep_rows = sweep(
                np.asarray(train_set.inputs),
                train_set.labels,
                np.asarray(test_set.inputs),
                test_set.labels,
                grid,
                seed=config.train.seed,
                epochs_cap=config.sweep_epochs_cap,
                workers=config.sweep_workers,
                base_config=config.train,
            )
            _write(out / "sweep.csv", sweep_to_csv(sweep_rows))
            say(f"sweep: {len(sweep_rows)} cells")

    with _stage("simulate"):
        detector = Detector(model, normalizer, window=config.window,
                            threshold=config.train.threshold)
        sim_report = run_sim(config.sim, catalog, detector=detector)
        _write(out / "sim_report.csv", sim_report_to_csv(sim_report, config.sim))
        figures.save_latency_plot(out / "figures" / "latency.png", sim_report)
        say(f"simulate: comm {sim_report.overall_avg_latency_ms:.2f} ms "
            f"+ comp {sim_report.comp_latency_ms:.2f} ms")

    with _stage("figures"):
        clean_rows = matrix.labels == 0
        corr = correlation_matrix(matrix.values[clean_rows])
        _write(out / "correlation.csv", correlation_to_csv(corr))
        figures.save_heatmap_svg(out / "figures" / "correlation.svg", corr)
        figures.save_heatmap_png(out / "figures" / "correlation.png", corr)
        _attack_example_figure(out, trace, labeled, plan, catalog, scenarios, split_s)

    with _stage("manifest"):
        write_manifest(out)

    return PipelineResult(
        out_dir=out,
        model=model,
        history=history,
        metrics_report=metrics_report,
        sim_report=sim_report,
        sweep_rows=sweep_rows,
        split_s=split_s,
        train_windows=len(train_set),
        test_windows=len(test_set),
    )


def _attack_example_figure(out, trace, labeled, plan, catalog, scenarios, split_s):
    """Original vs injected series around the first test-region window."""
    test_windows = [w for w in plan.windows if w.start_s >= split_s]
    if not test_windows:
        return
    window = test_windows[0]
    scenario = next(s for s in scenarios if s.scenario_id == window.scenario_id)
    spec = catalog.by_name(scenario.qualified_signal)
    lo = max(0.0, window.start_s - window.duration_s)
    hi = window.end_s + window.duration_s
    ts_all, vals_all = decoded_series(labeled.frames, spec)
    keep = (ts_all >= lo) & (ts_all <= hi)
    attacked_ts, attacked_vals = [], []
    for idx in labeled.provenance:
        frame = labeled.frames[idx]
        if frame.can_id == spec.message_id and lo <= frame.timestamp <= hi:
            if int(labeled.scenario_ids[idx]) == scenario.scenario_id:
                attacked_ts.append(frame.timestamp)
                attacked_vals.append(
                    float(decoded_series(Trace([frame]), spec)[1][0])
                )
    figures.save_signal_plot(
        out / "figures" / "attack_example.png",
        ts_all[keep],
        vals_all[keep],
        spec.qualified_name,
        np.asarray(attacked_ts),
        np.asarray(attacked_vals),
    )


# ---------------------------------------------------------------------------
# Manifest: "<sha256>  <bytes>  <fixed|volatile>  <relative path>"
# ---------------------------------------------------------------------------

def _iter_artifacts(run_dir: Path):
    for path in sorted(run_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.txt":
            yield path


def write_manifest(run_dir: Path) -> Path:
    run_dir = Path(run_dir)
    lines = []
    for path in _iter_artifacts(run_dir):
        rel = path.relative_to(run_dir).as_posix()
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        flag = "volatile" if rel in VOLATILE_ARTIFACTS else "fixed"
        lines.append(f"{digest}  {path.stat().st_size}  {flag}  {rel}")
    manifest = run_dir / "manifest.txt"
    _write(manifest, "\n".join(lines) + "\n")
    return manifest


def read_manifest(run_dir: Path) -> dict[str, tuple[str, str]]:
    """name -> (sha256, flag)"""
    entries = {}
    for line in (Path(run_dir) / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        digest, _, flag, name = line.split("  ", 3)
        entries[name] = (digest, flag)
    return entries


def verify_manifest(run_dir: Path) -> list[str]:
    """Names whose current content hash no longer matches the manifest."""
    run_dir = Path(run_dir)
    entries = read_manifest(run_dir)
    bad = []
    for name, (digest, _) in entries.items():
        path = run_dir / name
        if not path.is_file():
            bad.append(name)
        elif hashlib.sha256(path.read_bytes()).hexdigest() != digest:
            bad.append(name)
    return bad


def compare_runs(dir_a: Path, dir_b: Path) -> list[str]:
    """Non-volatile artifacts whose hashes differ between two run directories."""
    a = read_manifest(dir_a)
    b = read_manifest(dir_b)
    diff = []
    for name in sorted(set(a) | set(b)):
        flag = a.get(name, b.get(name))[1]
        if flag == "volatile":
            continue
        if name not in a or name not in b or a[name][0] != b[name][0]:
            diff.append(name)
    return diff
