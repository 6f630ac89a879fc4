"""Command-line interface.

One subcommand per pipeline stage. Machine-readable outputs go to files;
a one-line summary prefixed with the stage name goes to stdout (suppressed
by --quiet). Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attack import (
    default_plan,
    default_scenarios,
    estimate_sigma,
    inject,
    labels_from_csv,
    labels_to_csv,
    plan_from_csv,
    plan_to_csv,
)
from .codec import default_catalog, load_catalog, load_trace, save_catalog, save_trace
from .errors import ToolkitError
from .evaluate import (
    best_row,
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
    Normalizer,
    assemble,
    correlated_pairs,
    correlation_matrix,
    fit_normalizer,
    load_features,
    save_features,
    windows,
)
from .lstm import (
    TrainConfig,
    load_checkpoint_file,
    predict_proba,
    save_checkpoint_file,
    train,
)
from .netsim import (
    Detector,
    SimConfig,
    check_deadline,
    event_log_to_csv,
    run_sim,
    sim_report_to_csv,
)
from .pipeline import PipelineConfig, run_pipeline
from .tracegen import TraceGenConfig, decoded_series, gen_trace
from . import report as figures
from .attack import LabeledTrace


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _catalog(args):
    return load_catalog(args.catalog) if args.catalog else default_catalog()


def _load_labeled(trace_path, labels_path, catalog) -> LabeledTrace:
    trace = load_trace(trace_path)
    if labels_path:
        labels, scenario_ids = labels_from_csv(Path(labels_path).read_text(), len(trace))
    else:
        labels = np.zeros(len(trace), dtype=np.int8)
        scenario_ids = np.zeros(len(trace), dtype=np.int16)
    return LabeledTrace(trace, labels, scenario_ids)


def _normalizer_from_checkpoint(meta) -> Normalizer:
    if "norm_mins" not in meta or "norm_maxs" not in meta:
        raise ToolkitError(
            "checkpoint carries no normalizer; train with the CLI to embed one"
        )
    return Normalizer(meta["norm_mins"], meta["norm_maxs"])


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def cmd_gen_trace(args) -> int:
    catalog = _catalog(args)
    config = TraceGenConfig(
        duration_s=args.duration,
        frame_rate_hz=args.rate,
        seed=args.seed,
        smoothness=args.smoothness,
    )
    trace = gen_trace(config, catalog)
    save_trace(args.out, trace)
    if args.save_catalog:
        save_catalog(args.save_catalog, catalog)
    _say(args, f"gen-trace: wrote {len(trace)} frames ({trace.duration:.3f} s) to {args.out}")
    return 0


def cmd_decode(args) -> int:
    catalog = _catalog(args)
    trace = load_trace(args.trace)
    spec = catalog.by_name(args.signal)
    ts, values = decoded_series(trace, spec)
    lines = ["timestamp,value"] + [f"{t:.6f},{float(v)!r}" for t, v in zip(ts, values)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.plot:
        figures.save_signal_plot(args.plot, ts, values, spec.qualified_name)
    _say(args, f"decode: {len(ts)} samples of {spec.qualified_name}"
               + (f" to {args.out}" if args.out else ""))
    return 0


def cmd_correlate(args) -> int:
    catalog = _catalog(args)
    labeled = _load_labeled(args.trace, args.labels, catalog)
    matrix = assemble(labeled, catalog)
    clean = matrix.values[matrix.labels == 0]
    corr = correlation_matrix(clean)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "correlation.csv").write_text(correlation_to_csv(corr))
    figures.save_heatmap_svg(out_dir / "correlation.svg", corr)
    figures.save_heatmap_png(out_dir / "correlation.png", corr)
    pairs = correlated_pairs(corr, threshold=args.threshold)
    _say(args, f"correlate: {len(pairs)} pairs with |r| > {args.threshold:g}, "
               f"reports in {out_dir}")
    return 0


def cmd_inject(args) -> int:
    catalog = _catalog(args)
    trace = load_trace(args.trace)
    scenarios = default_scenarios(catalog)
    sigma = estimate_sigma(trace, catalog)
    if args.plan:
        plan = plan_from_csv(Path(args.plan).read_text(), scenarios, seed=args.seed)
        merged = dict(sigma)
        merged.update(plan.sigma_by_signal)
        plan.sigma_by_signal = merged
    else:
        if args.split is None:
            raise ToolkitError("--split is required when no --plan is given")
        plan = default_plan(trace, args.split, args.seed, scenarios=scenarios,
                            sigma_by_signal=sigma)
    labeled = inject(trace, plan, catalog, scenarios)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_trace(out_dir / "trace.log", labeled.frames)
    (out_dir / "labels.csv").write_text(labels_to_csv(labeled))
    (out_dir / "plan.csv").write_text(plan_to_csv(plan, scenarios))
    _say(args, f"inject: {int(labeled.labels.sum())} of {len(labeled.frames)} frames "
               f"attacked, outputs in {out_dir}")
    return 0


def cmd_features(args) -> int:
    catalog = _catalog(args)
    labeled = _load_labeled(args.trace, args.labels, catalog)
    matrix = assemble(labeled, catalog)
    save_features(args.out, matrix)
    _say(args, f"features: {len(matrix)} rows x {matrix.n_features} features to {args.out}")
    return 0


def cmd_train(args) -> int:
    matrix = load_features(args.features)
    config = TrainConfig(
        hidden_size=args.neurons,
        epochs=args.epochs,
        batch_size=args.batch,
        dropout_p=args.dropout,
        learning_rate=args.lr,
        seed=args.seed,
    )
    train_matrix, _ = matrix.split_at(args.split)
    normalizer = fit_normalizer(train_matrix)
    train_set = windows(train_matrix, args.window,
                        values=normalizer.transform(train_matrix.values))
    model, history = train(np.asarray(train_set.inputs), train_set.labels, config)
    save_checkpoint_file(args.out, model, config, normalizer.mins, normalizer.maxs)
    final = history.epoch_losses[-1] if history.epoch_losses else float("nan")
    _say(args, f"train: {len(train_set)} windows, {config.epochs} epochs, "
               f"final loss {final:.4f}, checkpoint {args.out}")
    return 0


def cmd_predict(args) -> int:
    model, meta = load_checkpoint_file(args.model)
    normalizer = _normalizer_from_checkpoint(meta)
    matrix = load_features(args.features)
    dataset = windows(matrix, args.window, values=normalizer.transform(matrix.values))
    proba = predict_proba(model, np.asarray(dataset.inputs))
    labels = (proba >= args.threshold).astype(int)
    lines = ["timestamp,probability,label"] + [
        f"{t:.6f},{p:.6f},{la}"
        for t, p, la in zip(dataset.end_timestamps, proba, labels)
    ]
    Path(args.out).write_text("\n".join(lines) + "\n")
    _say(args, f"predict: {int(labels.sum())} of {len(labels)} windows flagged, "
               f"output {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, meta = load_checkpoint_file(args.model)
    normalizer = _normalizer_from_checkpoint(meta)
    matrix = load_features(args.features)
    _, test_matrix = matrix.split_at(args.split)
    dataset = windows(test_matrix, args.window,
                      values=normalizer.transform(test_matrix.values))
    preds = (predict_proba(model, np.asarray(dataset.inputs)) >= args.threshold).astype(
        np.int8
    )
    report = metrics(confusion(dataset.labels, preds))
    Path(args.out).write_text(metrics_to_csv(report))

    def fmt(v):
        return "n/a" if v is None else f"{v:.4f}"

    _say(args, f"eval: accuracy {report.accuracy:.4f} precision {fmt(report.precision)} "
               f"recall {fmt(report.recall)} fpr {fmt(report.fpr)}, report {args.out}")
    return 0


def cmd_sweep(args) -> int:
    matrix = load_features(args.features)
    train_matrix, test_matrix = matrix.split_at(args.split)
    normalizer = fit_normalizer(train_matrix)
    train_set = windows(train_matrix, args.window,
                        values=normalizer.transform(train_matrix.values))
    test_set = windows(test_matrix, args.window,
                       values=normalizer.transform(test_matrix.values))
    grid = full_grid() if args.grid == "full" else desk_grid()
    rows = sweep(
        np.asarray(train_set.inputs),
        train_set.labels,
        np.asarray(test_set.inputs),
        test_set.labels,
        grid,
        seed=args.seed,
        epochs_cap=args.epochs_cap,
        workers=args.workers,
    )
    Path(args.out).write_text(sweep_to_csv(rows))
    failed = [r for r in rows if r.error is not None]
    if not failed:
        best = best_row(rows)
        _say(args, f"sweep: {len(rows)} cells, best accuracy {best.accuracy:.4f} at "
                   f"neurons={best.hidden_size} epochs={best.epochs} "
                   f"batch={best.batch_size} dropout={best.dropout_p:g}")
        return 0
    _say(args, f"sweep: {len(failed)} of {len(rows)} cells failed; see {args.out}")
    return 1


def cmd_simulate(args) -> int:
    catalog = _catalog(args)
    config = SimConfig(
        frame_rate_hz=args.rate,
        duration_s=args.duration,
        hop_base_ms=args.base_ms,
        hop_jitter_ms=args.jitter_ms,
        malicious_delay_ms=args.malicious_delay_ms,
        enable_malicious=args.malicious,
        seed=args.seed,
    )
    trace = load_trace(args.trace) if args.trace else None
    detector = None
    if args.model:
        model, meta = load_checkpoint_file(args.model)
        detector = Detector(model, _normalizer_from_checkpoint(meta), window=args.window)
    plan = None
    if args.malicious:
        if not args.plan:
            raise ToolkitError("--malicious requires --plan")
        if trace is None:
            raise ToolkitError("--malicious requires --trace")
        plan = plan_from_csv(Path(args.plan).read_text(),
                             default_scenarios(catalog), seed=args.seed)
    report = run_sim(config, catalog, trace=trace, detector=detector, plan=plan,
                     keep_event_log=args.event_log)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sim_report.csv").write_text(sim_report_to_csv(report, config))
    figures.save_latency_plot(out_dir / "latency.png", report)
    if args.event_log:
        (out_dir / "event_log.csv").write_text(event_log_to_csv(report))
    _, deadline_ok = check_deadline(report, config)
    total = report.overall_avg_latency_ms + report.comp_latency_ms
    _say(args, f"simulate: {report.total_emitted} emissions, combined latency "
               f"{total:.2f} ms vs {config.deadline_ms:g} ms deadline "
               f"({'met' if deadline_ok else 'MISSED'}), report in {out_dir}")
    return 0


def _pipeline_config_from_ini(path: Path, out_dir: Path) -> PipelineConfig:
    ini = configparser.ConfigParser()
    with open(path, "r", encoding="ascii") as fh:
        ini.read_file(fh)

    def get(section, key, cast, default):
        if ini.has_option(section, key):
            return cast(ini.get(section, key))
        return default

    train_config = TrainConfig(
        hidden_size=get("train", "neurons", int, 50),
        epochs=get("train", "epochs", int, 50),
        batch_size=get("train", "batch", int, 128),
        dropout_p=get("train", "dropout", float, 0.5),
        learning_rate=get("train", "learning_rate", float, 0.001),
        seed=get("train", "seed", int, 42),
    )
    sim_config = SimConfig(
        frame_rate_hz=get("sim", "frame_rate_hz", float, 100.0),
        duration_s=get("sim", "duration_s", float, 10.0),
        hop_base_ms=get("sim", "hop_base_ms", float, 2.9),
        hop_jitter_ms=get("sim", "hop_jitter_ms", float, 0.2),
        seed=get("sim", "seed", int, 42),
    )
    sigma_overrides = {}
    if ini.has_section("attack"):
        for key, value in ini.items("attack"):
            if key.startswith("sigma."):
                sigma_overrides[key[len("sigma."):].upper()] = float(value)
    source = get("trace", "source", str, "synthetic")
    return PipelineConfig(
        out_dir=out_dir,
        trace_path=None if source == "synthetic" else Path(source),
        duration_s=get("trace", "duration_s", float, 300.0),
        frame_rate_hz=get("trace", "frame_rate_hz", float, 100.0),
        trace_seed=get("trace", "seed", int, 42),
        smoothness=get("trace", "smoothness", float, 2.0),
        split_s=get("features", "split_s", float, None),
        window=get("features", "window", int, 10),
        attack_seed=get("attack", "seed", int, 42),
        sigma_overrides=sigma_overrides,
        train=train_config,
        sim=sim_config,
        run_sweep=get("sweep", "enabled", lambda v: v.lower() == "true", False),
        sweep_grid=get("sweep", "grid", str, "desk"),
        sweep_workers=get("sweep", "workers", int, 1),
    )


def cmd_pipeline(args) -> int:
    out_dir = Path(args.out_dir)
    if args.config:
        config = _pipeline_config_from_ini(Path(args.config), out_dir)
    else:
        config = PipelineConfig(out_dir=out_dir)
    if args.duration is not None:
        config.duration_s = args.duration
    if args.split is not None:
        config.split_s = args.split
    if args.seed is not None:
        config.trace_seed = args.seed
        config.attack_seed = args.seed
        config.train.seed = args.seed
        config.sim.seed = args.seed
    if args.neurons is not None:
        config.train.hidden_size = args.neurons
    if args.epochs is not None:
        config.train.epochs = args.epochs
    if args.batch is not None:
        config.train.batch_size = args.batch
    if args.dropout is not None:
        config.train.dropout_p = args.dropout
    if args.sweep:
        config.run_sweep = True
    if args.sweep_grid is not None:
        config.sweep_grid = args.sweep_grid
    if args.workers is not None:
        config.sweep_workers = args.workers
    catalog = _catalog(args)
    log = None if args.quiet else (lambda msg: print(f"pipeline: {msg}"))
    result = run_pipeline(config, catalog=catalog, log=log)
    _say(args, f"pipeline: complete, artifacts in {result.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(sub, seed=False, catalog=True):
    sub.add_argument("--quiet", action="store_true", help="suppress summary output")
    if catalog:
        sub.add_argument("--catalog", metavar="CSV",
                         help="signal catalog CSV (default: built-in)")
    if seed:
        sub.add_argument("--seed", type=int, default=42,
                         help="random seed (default 42)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cansentry",
        description="CAN bus false-data-injection toolkit: generate traces, "
                    "synthesize attacks, train and evaluate the LSTM detector, "
                    "and simulate network latency.",
    )
    parser.add_argument("--version", action="version", version=f"cansentry {__version__}")
    subs = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = subs.add_parser("gen-trace", help="generate a synthetic attack-free trace")
    p.add_argument("--out", required=True, help="output trace log path")
    p.add_argument("--duration", type=float, default=537.0, help="trace length, seconds")
    p.add_argument("--rate", type=float, default=100.0, help="per-message frame rate, Hz")
    p.add_argument("--smoothness", type=float, default=2.0,
                   help="latent process time constant, seconds")
    p.add_argument("--save-catalog", metavar="CSV",
                   help="also write the effective signal catalog")
    _add_common(p, seed=True)
    p.set_defaults(func=cmd_gen_trace)

    p = subs.add_parser("decode", help="extract one signal's scaled time series")
    p.add_argument("--trace", required=True, help="input trace log")
    p.add_argument("--signal", required=True,
                   help="signal name, qualified like EMS12.TPS when ambiguous")
    p.add_argument("--out", help="output CSV (default: stdout)")
    p.add_argument("--plot", metavar="PNG", help="also render a time-series figure")
    _add_common(p)
    p.set_defaults(func=cmd_decode)

    p = subs.add_parser("correlate", help="correlation matrix, CSV + SVG/PNG heatmaps")
    p.add_argument("--trace", required=True, help="input trace log")
    p.add_argument("--labels", help="labels sidecar; attacked rows are excluded")
    p.add_argument("--out-dir", required=True, help="directory for reports")
    p.add_argument("--threshold", type=float, default=0.7,
                   help="|r| threshold for the reported pair count")
    _add_common(p)
    p.set_defaults(func=cmd_correlate)

    p = subs.add_parser("inject", help="synthesize a labeled attack trace")
    p.add_argument("--trace", required=True, help="attack-free input trace log")
    p.add_argument("--plan", help="attack plan CSV (default: place windows automatically)")
    p.add_argument("--split", type=float,
                   help="train/test split seconds for automatic placement")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p, seed=True)
    p.set_defaults(func=cmd_inject)

    p = subs.add_parser("features", help="assemble the value-hold feature matrix")
    p.add_argument("--trace", required=True, help="input trace log")
    p.add_argument("--labels", help="labels sidecar CSV")
    p.add_argument("--out", required=True, help="output features CSV")
    _add_common(p)
    p.set_defaults(func=cmd_features)

    p = subs.add_parser("train", help="train the LSTM detector")
    p.add_argument("--features", required=True, help="features CSV")
    p.add_argument("--split", type=float, required=True,
                   help="train on rows before this many seconds")
    p.add_argument("--neurons", type=int, default=50, help="LSTM and FC layer width")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=0.001, help="Adam learning rate")
    p.add_argument("--window", type=int, default=10, help="sequence window length")
    p.add_argument("--out", required=True, help="output checkpoint path")
    _add_common(p, seed=True, catalog=False)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("predict", help="label windows of a feature stream")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--features", required=True, help="features CSV")
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output predictions CSV")
    _add_common(p, catalog=False)
    p.set_defaults(func=cmd_predict)

    p = subs.add_parser("eval", help="score the detector on the test region")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--features", required=True, help="features CSV")
    p.add_argument("--split", type=float, required=True,
                   help="evaluate on rows at or after this many seconds")
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output metrics CSV")
    _add_common(p, catalog=False)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("sweep", help="hyperparameter grid sweep")
    p.add_argument("--features", required=True, help="features CSV")
    p.add_argument("--split", type=float, required=True)
    p.add_argument("--grid", choices=("desk", "full"), default="desk",
                   help="desk: epochs capped at 50; full: the 48-cell grid")
    p.add_argument("--epochs-cap", type=int, help="cap actual training epochs per cell")
    p.add_argument("--workers", type=int, default=1, help="parallel training processes")
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--out", required=True, help="output sweep CSV")
    _add_common(p, seed=True, catalog=False)
    p.set_defaults(func=cmd_sweep)

    p = subs.add_parser("simulate", help="discrete-event network latency simulation")
    p.add_argument("--out-dir", required=True, help="directory for the report")
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--rate", type=float, default=100.0)
    p.add_argument("--base-ms", type=float, default=2.9, help="per-hop base delay")
    p.add_argument("--jitter-ms", type=float, default=0.2, help="per-hop uniform jitter")
    p.add_argument("--malicious-delay-ms", type=float, default=0.5)
    p.add_argument("--trace", help="replay this trace log instead of synthesizing")
    p.add_argument("--model", help="attach this detector checkpoint")
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--malicious", action="store_true",
                   help="attach the malicious ECU (requires --plan and --trace)")
    p.add_argument("--plan", help="attack plan CSV for the malicious ECU")
    p.add_argument("--event-log", action="store_true", help="write the full event log")
    _add_common(p, seed=True)
    p.set_defaults(func=cmd_simulate)

    p = subs.add_parser("pipeline", help="run the end-to-end pipeline")
    p.add_argument("--out-dir", required=True, help="run directory")
    p.add_argument("--config", help="INI config file (flags override it)")
    p.add_argument("--duration", type=float, help="synthetic trace length, seconds")
    p.add_argument("--split", type=float, help="train/test split, seconds")
    p.add_argument("--seed", type=int, help="master seed for every stage")
    p.add_argument("--neurons", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--sweep", action="store_true", help="also run the grid sweep")
    p.add_argument("--sweep-grid", choices=("desk", "full"))
    p.add_argument("--workers", type=int, help="sweep worker processes")
    _add_common(p)
    p.set_defaults(func=cmd_pipeline)

    return parser


def iter_subcommands(parser: argparse.ArgumentParser) -> dict[str, argparse.ArgumentParser]:
    """name -> subparser, for help/flag introspection."""
    for action in parser._actions:  # noqa: SLF001 - argparse offers no public API
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ToolkitError as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
