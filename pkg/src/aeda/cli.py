"""``aeda`` command-line entry point.

Settings resolve as dataclass defaults < ``--config`` file < flags.  The
config file is ``key = value`` lines under ``[train]``, ``[synth]`` or
``[run]`` headers; keys before any header belong to ``[run]``, and a run
manifest written by this tool is itself a valid config.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import checkpoint
from .data import (
    PAMAP2_IMU_COLUMNS,
    DataError,
    featurize_events,
    load_dataset,
    make_windows,
    parse_casas_log,
    parse_imu_csv,
    save_dataset,
)
from .engine import TrainConfig, TrainingDiverged, run_source_stages, union_vocabulary
from .evaluate import (
    DEFAULT_ALPHAS,
    DEFAULT_FRACTIONS,
    DuplicateRunError,
    ReportWriter,
    SynthPairs,
    ablation,
    alpha_sweep,
    baseline_same_domain,
    fraction_sweep,
    read_reports,
    run_jobs,
    summarize,
)
from .synth import SynthConfig, diversity_profile, generate_domain_pair, write_manifest

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4
COMMANDS = ("gen", "train-src", "pipeline-aeda", "pipeline-aedann", "sweep-fraction", "sweep-alpha",
            "ablate", "baseline", "eval")
REPORT_NAME = "report.csv"


class UsageError(ValueError):
    pass


@dataclass
class RunOptions:
    labeled_fraction: float = 0.1
    seeds: int = 1
    workers: int = 1
    source: str = ""
    target: str = ""
    fractions: tuple = DEFAULT_FRACTIONS
    alphas: tuple = DEFAULT_ALPHAS


@dataclass
class RunSpec:
    command: str
    out: Path
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    run: RunOptions = field(default_factory=RunOptions)

    @property
    def seeds(self):
        return [self.train.seed + i for i in range(self.run.seeds)]

    @property
    def synthetic(self):
        return not (self.run.source or self.run.target)


# --- config files -----------------------------------------------------------------


def _coerce(raw, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(float(v) for v in raw.replace(",", " ").split())
    try:
        return type(default)(raw)
    except ValueError:
        raise UsageError(f"cannot read {raw!r} as {type(default).__name__}") from None


def _apply(obj, values, where):
    names = {f.name for f in fields(obj)}
    unknown = set(values) - names
    if unknown:
        raise UsageError(f"unknown {where} keys: {', '.join(sorted(unknown))}")
    return replace(obj, **{k: _coerce(v, getattr(obj, k)) for k, v in values.items()})


def read_config(text):
    """Parse config text into ``{"train": {...}, "synth": {...}, "run": {...}}`` of raw strings."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__", strict=False)
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"bad config: {exc}") from None
    out = {"train": {}, "synth": {}, "run": {}}
    for section in parser.sections():
        if section not in out:
            raise UsageError(f"unknown config section [{section}]")
        out[section].update(parser[section])
    # manifest bookkeeping keys are not settings
    for key in ("method", "run_id", "source_fingerprint", "target_fingerprint"):
        out["run"].pop(key, None)
    for key in ("source", "target"):
        if key in out["run"] and out["run"][key].startswith("synth-"):
            out["run"].pop(key)
    # a bare key in [run] naming a train or synth field goes there
    for key in list(out["run"]):
        if key not in {f.name for f in fields(RunOptions)}:
            if key in TrainConfig.field_names():
                out["train"].setdefault(key, out["run"].pop(key))
            elif key in SynthConfig.field_names():
                out["synth"].setdefault(key, out["run"].pop(key))
    return out


# --- argument parsing --------------------------------------------------------------


def _floats(text):
    try:
        return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a list of numbers, got {text!r}") from None


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("data")
    g.add_argument("--synthetic", action="store_true", help="use the synthetic domain pair (default)")
    g.add_argument("--source", help="source windowed-dataset file (.wds)")
    g.add_argument("--target", help="target windowed-dataset file (.wds)")
    g.add_argument("--window", type=int, help="window length n_w")
    g = common.add_argument_group("training")
    g.add_argument("--seed", type=int, help="master seed for data, splits and training")
    g.add_argument("--alpha", type=float, help="weight of the channel-distribution KL term")
    g.add_argument("--labeled-fraction", type=float, help="fraction of target windows with labels")
    g.add_argument("--batch", type=int, help="mini-batch size")
    g.add_argument("--epochs", type=int, help="maximum epochs per stage")
    g.add_argument("--patience", type=int, help="early-stopping patience")
    g.add_argument("--lr", type=float, help="Adam learning rate")
    g.add_argument("--bottleneck", type=int, help="bottleneck width b")
    g.add_argument("--kld-layers", choices=("encoder", "encoder+decoder"))
    g.add_argument("--lam", type=float, help="gradient-reversal strength")
    g = common.add_argument_group("run")
    g.add_argument("--config", help="key = value settings file")
    g.add_argument("--out", help="output directory (default $AEDA_OUT or ./aeda-out)")
    g.add_argument("--seeds", type=int, help="number of consecutive seeds starting at --seed")
    g.add_argument("--workers", type=int, help="parallel worker processes for multi-run commands")
    g.add_argument("--quiet", action="store_true", help="suppress per-stage lines")

    parser = argparse.ArgumentParser(prog="aeda", description="Auto-encoder domain adaptation experiments.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    gen = sub.add_parser("gen", parents=[common], help="write dataset caches (synthetic, CASAS or IMU)")
    gen.add_argument("--casas", help="CASAS event log to window")
    gen.add_argument("--imu", help="PAMAP2-style IMU table to window")
    gen.add_argument("--imu-block", choices=sorted(PAMAP2_IMU_COLUMNS), default="hand")
    gen.add_argument("--name", help="domain name for --casas/--imu")
    gen.add_argument("--stride", type=int, default=1)
    sub.add_parser("train-src", parents=[common], help="train the source auto-encoder and classifier")
    sub.add_parser("pipeline-aeda", parents=[common], help="one full adaptation run")
    sub.add_parser("pipeline-aedann", parents=[common], help="one adversarial-head run")
    sf = sub.add_parser("sweep-fraction", parents=[common], help="accuracy over labeled fractions")
    sf.add_argument("--fractions", type=_floats)
    sa = sub.add_parser("sweep-alpha", parents=[common], help="accuracy over alpha values")
    sa.add_argument("--alphas", type=_floats)
    sub.add_parser("ablate", parents=[common], help="paired runs with and without the KL term")
    sub.add_parser("baseline", parents=[common], help="same-domain ceiling")
    ev = sub.add_parser("eval", parents=[common], help="summarise a report file")
    ev.add_argument("--report", help="report CSV (default <out>/report.csv)")
    return parser


_TRAIN_FLAGS = {"alpha": "alpha", "batch": "batch_size", "epochs": "max_epochs", "patience": "patience",
                "lr": "learning_rate", "seed": "seed", "bottleneck": "b", "kld_layers": "kld_layers",
                "lam": "lam"}
_RUN_FLAGS = {"labeled_fraction": "labeled_fraction", "seeds": "seeds", "workers": "workers",
              "source": "source", "target": "target", "fractions": "fractions", "alphas": "alphas"}


def resolve(args):
    """Merge defaults, the config file and explicit flags into a :class:`RunSpec`."""
    out = Path(args.out or os.environ.get("AEDA_OUT") or "aeda-out")
    spec = RunSpec(args.command, out)
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        cfg = read_config(text)
        spec.train = _apply(spec.train, cfg["train"], "train")
        spec.synth = _apply(spec.synth, cfg["synth"], "synth")
        spec.run = _apply(spec.run, cfg["run"], "run")
    flags = vars(args)
    train = {v: flags[k] for k, v in _TRAIN_FLAGS.items() if flags.get(k) is not None}
    run = {v: flags[k] for k, v in _RUN_FLAGS.items() if flags.get(k) is not None}
    try:
        spec.train = replace(spec.train, **train)
        spec.run = replace(spec.run, **run)
        synth = {"seed": spec.train.seed}
        if args.window is not None:
            synth["n_w"] = args.window
        spec.synth = replace(spec.synth, **synth)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.synthetic and not spec.synthetic:
        raise UsageError("--synthetic conflicts with --source/--target")
    if not spec.synthetic and not (spec.run.source and spec.run.target) and args.command != "gen":
        raise UsageError("--source and --target must be given together")
    if not 0.0 < spec.run.labeled_fraction <= 1.0:
        raise UsageError("--labeled-fraction must be in (0, 1]")
    if spec.run.seeds < 1 or spec.run.workers < 1:
        raise UsageError("--seeds and --workers must be >= 1")
    return spec


# --- commands ------------------------------------------------------------------


def _pairs(spec):
    if spec.synthetic:
        return SynthPairs(spec.synth)
    source, target = load_dataset(spec.run.source), load_dataset(spec.run.target)
    if source.window_shape[1] != target.window_shape[1]:
        raise DataError(f"window lengths differ: {source.window_shape[1]} vs {target.window_shape[1]}")
    return source, target


def _print_report(r):
    unseen = "n/a" if r.accuracy_unseen is None else f"{r.accuracy_unseen:.4f}"
    print(f"run {r.run_id}: accuracy {r.accuracy_overall:.4f}, unseen {unseen}, {r.wall_time_s:.1f}s")


def _run_kw(spec):
    return dict(workers=spec.run.workers, writer=ReportWriter(spec.out / REPORT_NAME), out_dir=spec.out,
                on_report=_print_report)


def cmd_gen(spec, args):
    spec.out.mkdir(parents=True, exist_ok=True)
    n_w = spec.synth.n_w
    if args.casas:
        with open(args.casas) as fh:
            events, dspec = parse_casas_log(fh, name=args.name or Path(args.casas).stem)
        data = make_windows(featurize_events(events, dspec), [e.activity_label for e in events], dspec,
                            n_w, args.stride)
        path = spec.out / f"{dspec.name}.wds"
        save_dataset(path, data)
        print(f"gen: {len(data)} windows, {dspec.n_features} sensors, {len(dspec.label_vocabulary)} classes -> {path}")
        return 0
    if args.imu:
        with open(args.imu) as fh:
            table = parse_imu_csv(fh, PAMAP2_IMU_COLUMNS[args.imu_block], name=args.name or args.imu_block)
        data = make_windows(table.features, table.labels, table.spec, n_w, args.stride)
        path = spec.out / f"{table.spec.name}.wds"
        save_dataset(path, data)
        print(f"gen: {len(data)} windows, {table.spec.n_features} channels -> {path}")
        return 0
    source, target = generate_domain_pair(spec.synth)
    save_dataset(spec.out / "source.wds", source)
    save_dataset(spec.out / "target.wds", target)
    write_manifest(spec.out / "synth.manifest", spec.synth)
    unseen_f, unseen_c, sensor, klass = diversity_profile(source, target)
    print(f"gen: source {len(source)}x{source.window_shape}, target {len(target)}x{target.window_shape}, "
          f"unseen classes {unseen_c} ({klass}) -> {spec.out}")
    return 0


def cmd_train_src(spec, args):
    pairs = _pairs(spec)
    spec.out.mkdir(parents=True, exist_ok=True)
    for seed in spec.seeds:
        source, target = pairs(seed) if callable(pairs) else pairs
        cfg = replace(spec.train, seed=seed)
        vocab = union_vocabulary(source.spec.label_vocabulary, target.spec.label_vocabulary)
        stage = run_source_stages(source, cfg, vocab)
        run_id = f"source.{source.spec.name}.s{seed}"
        checkpoint.save(spec.out / f"{run_id}.src_ae.aeda", stage.model.layers)
        checkpoint.save(spec.out / f"{run_id}.src_clf.aeda", stage.model.encoder_layers + stage.head.layers)
        print(f"train-src {run_id}: {stage.model.epochs_trained} + {stage.head.epochs_trained} epochs -> {spec.out}")
    return 0


def _single(method):
    def command(spec, args):
        pairs = _pairs(spec)
        jobs = [(method, pairs, spec.run.labeled_fraction, replace(spec.train, seed=s)) for s in spec.seeds]
        run_jobs(jobs, **_run_kw(spec))
        return 0
    return command


def cmd_sweep_fraction(spec, args):
    reports = fraction_sweep(_pairs(spec), sorted(spec.run.fractions), spec.train, spec.seeds, **_run_kw(spec))
    for f, (m, s, n) in sorted(summarize(reports, key=lambda r: r.labeled_fraction).items()):
        print(f"fraction {f:g}: {m:.4f} +- {s:.4f} (n={n}, sample std)")
    return 0


def cmd_sweep_alpha(spec, args):
    sweep = alpha_sweep(_pairs(spec), spec.run.alphas, spec.train, spec.seeds, spec.run.labeled_fraction,
                        **_run_kw(spec))
    for a, m in sweep.means.items():
        flag = "  <- best" if a == sweep.best_alpha else ""
        print(f"alpha {a:g}: {m:.4f}{flag}")
    return 0


def cmd_ablate(spec, args):
    res = ablation(_pairs(spec), spec.train, spec.seeds, spec.run.labeled_fraction, **_run_kw(spec))
    print(f"ablation: mean accuracy delta (with - without KL term) {100 * res.delta_mean:+.2f} points")
    return 0


def cmd_baseline(spec, args):
    baseline_same_domain(_pairs(spec), spec.train, spec.seeds, spec.run.labeled_fraction, **_run_kw(spec))
    return 0


def cmd_eval(spec, args):
    path = Path(args.report) if args.report else spec.out / REPORT_NAME
    try:
        reports = read_reports(path)
    except OSError as exc:
        raise DataError(f"cannot read report: {exc}") from None
    overall = summarize(reports)
    unseen = summarize(reports, field="accuracy_unseen")
    for key in sorted(overall, key=str):
        method, fraction, alpha = key
        m, s, n = overall[key]
        line = f"{method} fraction={fraction:g} alpha={alpha:g}: {m:.4f} +- {s:.4f} (n={n}, sample std)"
        if key in unseen:
            line += f", unseen {unseen[key][0]:.4f}"
        print(line)
    return 0


HANDLERS = {
    "gen": cmd_gen,
    "train-src": cmd_train_src,
    "pipeline-aeda": _single("aeda"),
    "pipeline-aedann": _single("aedann"),
    "sweep-fraction": cmd_sweep_fraction,
    "sweep-alpha": cmd_sweep_alpha,
    "ablate": cmd_ablate,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        spec = resolve(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"aeda: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not args.quiet:
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(logging.Formatter("  %(message)s"))
        for name in ("aeda.engine", "aeda.aedann"):
            log = logging.getLogger(name)
            log.setLevel(logging.INFO)
            log.addHandler(handler)
    try:
        return HANDLERS[spec.command](spec, args)
    except TrainingDiverged as exc:
        print(f"aeda: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, DuplicateRunError, checkpoint.CheckpointError, OSError) as exc:
        print(f"aeda: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        if not args.quiet:
            for name in ("aeda.engine", "aeda.aedann"):
                logging.getLogger(name).removeHandler(handler)


run = main

if __name__ == "__main__":
    sys.exit(main())
