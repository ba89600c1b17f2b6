"""Command-line front end.

Every subcommand writes ``<out>.manifest.json`` beside its main output with
the argument vector, configuration, seed and SHA-256 digests of inputs and
outputs. Exit status: 0 on success, 1 on domain errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import secrets
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .cascade import CascadeModel, fit_cascade, synthesize
from .errors import TrafficError
from .fractal import analyze
from .mmpp import MmppModel, fit_mmpp_histogram, fit_mmpp_scene
from .netsim import (
    NetworkConfig,
    SourceSpec,
    run_simulation,
    sweep_load,
    write_metrics_csv,
)
from .trace import Trace, load_trace, write_trace

log = logging.getLogger("mftraffic")

COMPARE_MODELS = ("replay", "cascade", "mmpp-hist", "mmpp-scene")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: list
    config: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def add_input(self, path):
        if path is not None:
            self.inputs[str(path)] = sha256(path)

    def add_output(self, path):
        self.outputs[str(path)] = sha256(path)

    def write(self, path):
        doc = {
            "tool": "mftraffic",
            "version": __version__,
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "notes": self.notes,
        }
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from None


def _pair(text: str) -> tuple[float, float]:
    vals = _float_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma separated numbers, got {text!r}")
    return vals[0], vals[1]


def _int_pair(text: str) -> tuple[int, int]:
    lo, hi = _pair(text)
    return int(lo), int(hi)


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _add_trace_args(p, required=True):
    p.add_argument("--trace", required=required, help="trace file (frame sizes or slot intensities)")
    p.add_argument("--format", default="plain", choices=("plain", "csv_column"))
    p.add_argument("--column", help="column name for --format csv_column")
    p.add_argument("--slot", type=float, default=1.0, help="slot duration in seconds")


def _add_sim_args(p):
    p.add_argument("--config", help="JSON file with NetworkConfig fields")
    p.add_argument("--duration", type=float, default=60.0, help="simulated seconds")
    p.add_argument("--warmup", type=float, help="seconds discarded before measuring (default 10%% of duration)")
    p.add_argument("--seed", type=_seed)
    p.add_argument("--workers", type=int, default=1, help="processes for sweep rows")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mftraffic", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="Hurst, Hölder and identification report")
    _add_trace_args(p)
    p.add_argument("--out", required=True, help="key=value report; alphas go to <stem>.alphas.csv")
    p.add_argument("--levels", type=_int_pair, help="Hölder regression levels lo,hi (default 2,depth)")

    p = sub.add_parser("fit", help="fit a cascade model")
    _add_trace_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="force the process count")
    p.add_argument("--hurst", type=float, help="force the Hurst exponent")
    p.add_argument("--bounds", type=_pair, help="output value bounds lo,hi")
    p.add_argument("--levels", type=_int_pair)

    p = sub.add_parser("generate", help="synthesize a trace from a cascade model")
    p.add_argument("--model", required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--seed", type=_seed)
    p.add_argument("--out", required=True)

    p = sub.add_parser("mmpp-fit", help="fit an MMPP baseline")
    _add_trace_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--method", default="histogram", choices=("histogram", "scene"))
    p.add_argument("--states", type=int, help="state count (default 30 histogram, 300 scene)")
    p.add_argument("--scene-window", type=int, default=24)
    p.add_argument("--scene-threshold", type=float, default=0.5)

    for name, helptext in (("simulate", "one simulation run"), ("sweep", "simulate over link loads")):
        p = sub.add_parser(name, help=helptext)
        _add_trace_args(p, required=False)
        p.add_argument("--model", help="cascade or MMPP model JSON used as the frame source")
        p.add_argument("--out", required=True, help="metrics CSV")
        _add_sim_args(p)
        if name == "simulate":
            p.add_argument("--load", type=float, help="calibrate cross traffic to this link load")
            p.add_argument("--cross-rate", type=float, default=0.0, help="cross traffic packets/s (without --load)")
        else:
            p.add_argument("--loads", type=_float_list, required=True)

    p = sub.add_parser("compare", help="replay vs cascade vs MMPP baselines over link loads")
    _add_trace_args(p)
    p.add_argument("--out", required=True, help="long-format CSV keyed by (model, load)")
    p.add_argument("--loads", type=_float_list, required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--hurst", type=float)
    p.add_argument("--states", type=int, default=30, help="histogram MMPP states")
    p.add_argument("--scene-states", type=int, default=300)
    p.add_argument("--scene-window", type=int, default=24)
    p.add_argument("--scene-threshold", type=float, default=0.5)
    _add_sim_args(p)
    return parser


def _load_trace(args) -> Trace:
    return load_trace(args.trace, args.format, args.slot, column=args.column)


def _config(args) -> NetworkConfig:
    return NetworkConfig.load(args.config) if args.config else NetworkConfig()


def _frame_source(args) -> tuple[SourceSpec, str]:
    if bool(args.trace) == bool(args.model):
        raise TrafficError("give exactly one of --trace or --model as the frame source")
    if args.trace:
        return SourceSpec("trace_replay", _load_trace(args)), args.trace
    with open(args.model, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("kind") == "mmpp":
        return SourceSpec("mmpp", MmppModel.from_dict(doc)), args.model
    return SourceSpec("cascade", CascadeModel.from_dict(doc)), args.model


def _manifest_path(out) -> Path:
    return Path(str(out) + ".manifest.json")


def cmd_analyze(args, manifest):
    trace = _load_trace(args)
    manifest.add_input(args.trace)
    report = analyze(trace, level_range=args.levels)
    report.write(args.out)
    alphas = Path(args.out).with_suffix(".alphas.csv")
    report.write_alphas(alphas)
    return [args.out, alphas]


def cmd_fit(args, manifest):
    trace = _load_trace(args)
    manifest.add_input(args.trace)
    model = fit_cascade(trace, n=args.n, hurst=args.hurst, bounds=args.bounds, level_range=args.levels)
    model.save(args.out)
    return [args.out]


def cmd_generate(args, manifest):
    model = CascadeModel.load(args.model)
    manifest.add_input(args.model)
    trace, report = synthesize(model, args.length, manifest.seed)
    write_trace(trace, args.out)
    manifest.notes.append(
        f"redraws={list(report.redraws)} sample_mean_shift={report.sample_mean_shift:.6g} "
        f"sample_cv2_shift={report.sample_cv2_shift:.6g} expected_mean_shift={report.expected_mean_shift:.6g} "
        f"expected_cv2_shift={report.expected_cv2_shift:.6g}"
    )
    return [args.out]


def cmd_mmpp_fit(args, manifest):
    trace = _load_trace(args)
    manifest.add_input(args.trace)
    if args.method == "histogram":
        model = fit_mmpp_histogram(trace, args.states or 30)
    else:
        model = fit_mmpp_scene(trace, args.states or 300, args.scene_window, args.scene_threshold)
    model.save(args.out)
    return [args.out]


def cmd_simulate(args, manifest):
    config = _config(args)
    manifest.config = config.to_dict()
    source, path = _frame_source(args)
    manifest.add_input(path)
    warmup = args.warmup if args.warmup is not None else 0.1 * args.duration
    if args.load is not None:
        sweep = sweep_load(config, source, None, [args.load], args.duration, warmup, manifest.seed)
        load, metrics = sweep.rows[0]
    else:
        cross = SourceSpec("poisson_cross", rate_scale=args.cross_rate)
        metrics = run_simulation(config, [source, cross], args.duration, warmup, manifest.seed)
        load = metrics.offered_bps / config.link_rate
    write_metrics_csv(args.out, [(None, load, metrics)])
    return [args.out]


def cmd_sweep(args, manifest):
    config = _config(args)
    manifest.config = config.to_dict()
    source, path = _frame_source(args)
    manifest.add_input(path)
    sweep = sweep_load(config, source, None, args.loads, args.duration, args.warmup, manifest.seed, args.workers)
    manifest.notes.extend(sweep.violations)
    sweep.write_csv(args.out)
    return [args.out]


@dataclass
class Comparison:
    rows: list  # (model, load, SimMetrics)
    skipped: dict
    models: dict

    def ranking(self) -> list[tuple[str, float]]:
        """Models ordered by mean absolute relative deviation of inter-arrival variance from replay."""
        ref = {load: m.interarrival_variance for model, load, m in self.rows if model == "replay"}
        scores = {}
        for model, load, m in self.rows:
            if model == "replay":
                continue
            r = ref.get(load, math.nan)
            if r and not math.isnan(r) and not math.isnan(m.interarrival_variance):
                scores.setdefault(model, []).append(abs(m.interarrival_variance / r - 1.0))
        out = [(k, sum(v) / len(v)) for k, v in scores.items()]
        return sorted(out, key=lambda kv: (kv[1], kv[0]))


def compare_pipeline(
    trace: Trace,
    loads,
    config: NetworkConfig,
    seed: int,
    duration: float = 60.0,
    warmup: float | None = None,
    n: int | None = None,
    hurst: float | None = None,
    hist_states: int = 30,
    scene_states: int = 300,
    scene_window: int = 24,
    scene_threshold: float = 0.5,
    workers: int = 1,
) -> Comparison:
    """Fit every model to ``trace`` and sweep all of them with identical config and seeds.

    A model whose fit fails is skipped with the reason recorded; the others
    still run.
    """
    sources = {"replay": SourceSpec("trace_replay", trace)}
    skipped = {}
    fitted = {}
    fits = {
        "cascade": lambda: SourceSpec("cascade", fit_cascade(trace, n=n, hurst=hurst)),
        "mmpp-hist": lambda: SourceSpec("mmpp", fit_mmpp_histogram(trace, hist_states)),
        "mmpp-scene": lambda: SourceSpec("mmpp", fit_mmpp_scene(trace, scene_states, scene_window, scene_threshold)),
    }
    for name, fit in fits.items():
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                sources[name] = fit()
            fitted[name] = sources[name].payload
            for w in caught:
                log.warning("%s: %s", name, w.message)
        except TrafficError as exc:
            skipped[name] = f"{type(exc).__name__}: {exc}"
            log.warning("skipping %s: %s", name, skipped[name])

    rows = []
    for name in COMPARE_MODELS:
        if name not in sources:
            continue
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                sweep = sweep_load(config, sources[name], None, loads, duration, warmup, seed, workers)
        except TrafficError as exc:
            skipped[name] = f"{type(exc).__name__}: {exc}"
            continue
        rows.extend((name, load, m) for load, m in sweep.rows)
    return Comparison(rows, skipped, fitted)


def cmd_compare(args, manifest):
    config = _config(args)
    manifest.config = dict(
        config.to_dict(),
        duration=args.duration,
        warmup=args.warmup,
        n=args.n,
        hurst=args.hurst,
        states=args.states,
        scene_states=args.scene_states,
        scene_window=args.scene_window,
        scene_threshold=args.scene_threshold,
    )
    trace = _load_trace(args)
    manifest.add_input(args.trace)
    cmp = compare_pipeline(
        trace, args.loads, config, manifest.seed, args.duration, args.warmup, args.n, args.hurst,
        args.states, args.scene_states, args.scene_window, args.scene_threshold, args.workers,
    )
    write_metrics_csv(args.out, cmp.rows, with_model=True)
    ranking_path = Path(args.out).with_suffix(".ranking.csv")
    with open(ranking_path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("rank,model,mean_abs_rel_dev_interarrival_var\n")
        for i, (model, score) in enumerate(cmp.ranking(), start=1):
            fh.write(f"{i},{model},{score!r}\n")
    for name, reason in sorted(cmp.skipped.items()):
        manifest.notes.append(f"skipped {name}: {reason}")
    return [args.out, ranking_path]


COMMANDS = {
    "analyze": cmd_analyze,
    "fit": cmd_fit,
    "generate": cmd_generate,
    "mmpp-fit": cmd_mmpp_fit,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    seed = getattr(args, "seed", None)
    needs_seed = args.command in ("generate", "simulate", "sweep", "compare")
    if needs_seed and seed is None:
        seed = secrets.randbits(63)
        log.info("drew seed %d", seed)
    manifest = RunManifest(argv, {k: v for k, v in vars(args).items() if k != "command"}, seed)
    if not needs_seed:
        manifest.seed = None
    try:
        outputs = COMMANDS[args.command](args, manifest)
    except (TrafficError, OSError, ValueError) as exc:
        print(f"mftraffic {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for path in outputs:
        manifest.add_output(path)
    manifest.write(_manifest_path(args.out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
