"""Accuracy metrics, report rows and the experiment protocols.

Every protocol here is a loop over ``(setting, seed)`` jobs.  A job splits the
target with the run seed, trains, and scores on the unlabeled remainder, so
arms compared at the same seed always see the same split.
"""
from __future__ import annotations

import csv
import io
import math
import threading
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .aedann import predict_aedann, train_aedann
from .data import dataset_fingerprint, labeled_count, split_labeled
from .engine import (
    predict,
    run_aeda,
    run_source_stages,
    to_union,
    train_target_ae,
    union_vocabulary,
)
from .synth import SynthConfig, generate_domain_pair

METHODS = ("aeda", "aedann", "ablation_no_kld", "baseline_same_domain")
REPORT_HEADER = ("run_id,method,source,target,labeled_fraction,alpha,seed,accuracy_overall,accuracy_unseen,"
                 "epochs_src_ae,epochs_src_clf,epochs_tgt_ae,epochs_finetune,wall_time_s")
DEFAULT_FRACTIONS = (0.05, 0.1, 0.2, 0.4, 0.8)
DEFAULT_ALPHAS = tuple(float(f"1e-{k}") for k in range(8, 1, -1))


class DuplicateRunError(ValueError):
    pass


def accuracy(predictions, truths):
    """Fraction of exact matches."""
    p, t = np.asarray(predictions), np.asarray(truths)
    if p.shape != t.shape:
        raise ValueError(f"prediction/truth length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return float(np.mean(p == t))


def unseen_accuracy(predictions, truths, vocabulary, source_vocabulary):
    """Accuracy over windows whose true class is missing from ``source_vocabulary``; None if there are none."""
    missing = set(source_vocabulary) - set(vocabulary)
    if missing:
        raise ValueError(f"source classes {sorted(missing)} are not in the evaluation vocabulary")
    seen = np.array([name in set(source_vocabulary) for name in vocabulary])
    t = np.asarray(truths)
    mask = ~seen[t] if t.size else np.zeros(0, dtype=bool)
    if not mask.any():
        return None
    return accuracy(np.asarray(predictions)[mask], t[mask])


@dataclass(frozen=True)
class ExperimentReport:
    run_id: str
    method: str
    source: str
    target: str
    labeled_fraction: float
    alpha: float
    seed: int
    accuracy_overall: float
    accuracy_unseen: float | None
    epochs_src_ae: int
    epochs_src_clf: int
    epochs_tgt_ae: int
    epochs_finetune: int
    wall_time_s: float

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        for name in ("accuracy_overall", "accuracy_unseen"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} out of [0, 1]: {v}")

    def row(self):
        unseen = "" if self.accuracy_unseen is None else f"{self.accuracy_unseen:.4f}"
        return [self.run_id, self.method, self.source, self.target, repr(float(self.labeled_fraction)),
                repr(float(self.alpha)), str(self.seed), f"{self.accuracy_overall:.4f}", unseen,
                str(self.epochs_src_ae), str(self.epochs_src_clf), str(self.epochs_tgt_ae),
                str(self.epochs_finetune), f"{self.wall_time_s:.3f}"]

    def csv_line(self):
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(self.row())
        return buf.getvalue()


class ReportWriter:
    """Append-only CSV report; a run_id can be written once."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._ids = set()
        if self.path.exists() and self.path.stat().st_size:
            with open(self.path, newline="") as fh:
                rows = list(csv.reader(fh))
            if ",".join(rows[0]) != REPORT_HEADER:
                raise ValueError(f"{self.path} has an unexpected header")
            self._ids = {r[0] for r in rows[1:] if r}
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w") as fh:
                fh.write(REPORT_HEADER + "\n")

    def __contains__(self, run_id):
        return run_id in self._ids

    def append(self, report):
        with self._lock:
            if report.run_id in self._ids:
                raise DuplicateRunError(f"run {report.run_id!r} already reported in {self.path}")
            with open(self.path, "a") as fh:
                fh.write(report.csv_line())
            self._ids.add(report.run_id)


def read_reports(path):
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append(ExperimentReport(
                r["run_id"], r["method"], r["source"], r["target"], float(r["labeled_fraction"]),
                float(r["alpha"]), int(r["seed"]), float(r["accuracy_overall"]),
                float(r["accuracy_unseen"]) if r["accuracy_unseen"] else None,
                int(r["epochs_src_ae"]), int(r["epochs_src_clf"]), int(r["epochs_tgt_ae"]),
                int(r["epochs_finetune"]), float(r["wall_time_s"])))
    return out


def make_run_id(method, source, target, fraction, alpha, seed):
    return f"{method}.{source}.{target}.f{fraction:g}.a{alpha:g}.s{seed}"


# --- single runs ----------------------------------------------------------------


@dataclass
class RunOutcome:
    report: ExperimentReport
    checkpoints: dict
    manifest: str


def _evaluation_split(target, fraction, seed):
    split = split_labeled(target, fraction, seed)
    held = split.unlabeled()
    if len(held) == 0:
        warnings.warn("labeled fraction leaves no unlabeled target windows; scoring on the labeled set",
                      stacklevel=3)
        held = split.labeled()
    return split, held


def _score(pred, held, vocabulary, source_vocabulary):
    truth = to_union(held, vocabulary)
    return accuracy(pred, truth), unseen_accuracy(pred, truth, vocabulary, source_vocabulary)


def run_manifest(method, run_id, cfg, source, target, fraction, synth=None):
    """Plain-text ``key = value`` record of everything that determines a run."""
    lines = ["[run]", f"method = {method}", f"run_id = {run_id}", f"labeled_fraction = {fraction!r}",
             f"source = {source.spec.name}", f"target = {target.spec.name}",
             f"source_fingerprint = {dataset_fingerprint(source)}",
             f"target_fingerprint = {dataset_fingerprint(target)}", "", "[train]"]
    lines += [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in cfg.as_dict().items()]
    if synth is not None:
        lines += ["", "[synth]", synth.manifest().rstrip("\n")]
    return "\n".join(lines) + "\n"


def run_experiment(method, source, target, fraction, cfg, cache=None, run_id=None, synth=None):
    """One seeded run of ``method``; returns a :class:`RunOutcome`.

    ``cfg.seed`` drives the labeled split as well as training.  For
    ``ablation_no_kld`` the configured alpha is replaced by 0.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == "ablation_no_kld":
        cfg = replace(cfg, alpha=0.0)
    if method == "baseline_same_domain":
        source, target = same_domain_pair(target, cfg.seed)
    run_id = run_id or make_run_id(method, source.spec.name, target.spec.name, fraction, cfg.alpha, cfg.seed)
    if labeled_count(fraction, len(target)) == 0:
        raise ValueError(f"labeled fraction {fraction} gives no labeled target windows")
    start = time.perf_counter()
    split, held = _evaluation_split(target, fraction, cfg.seed)

    if method == "aedann":
        vocabulary = union_vocabulary(source.spec.label_vocabulary, target.spec.label_vocabulary)
        src = run_source_stages(source, cfg, vocabulary, cache)
        labeled = split.labeled()
        tgt_model = train_target_ae(labeled, src.ref, cfg, unlabeled=split.unlabeled().windows)
        result = train_aedann(source, labeled, src.model, tgt_model, cfg, vocabulary)
        pred, _ = predict_aedann(result.network, tgt_model, held.windows)
        epochs = (src.model.epochs_trained, src.head.epochs_trained, tgt_model.epochs_trained, result.epochs)
        stages = {
            "src_ae": src.model.layers,
            "src_clf": src.model.encoder_layers + src.head.layers,
            "tgt_ae": tgt_model.layers,
            "aedann": result.network.layers,
        }
    else:
        vocabulary = union_vocabulary(source.spec.label_vocabulary, target.spec.label_vocabulary)
        run = run_aeda(source, split, cfg, cache)
        pred, _ = predict(run.pipeline, held.windows)
        epochs = tuple(run.epochs[k] for k in ("src_ae", "src_clf", "tgt_ae", "finetune"))
        stages = run.checkpoints()

    overall, unseen = _score(pred, held, vocabulary, source.spec.label_vocabulary)
    report = ExperimentReport(run_id, method, source.spec.name, target.spec.name, fraction, cfg.alpha, cfg.seed,
                              overall, unseen, *epochs, time.perf_counter() - start)
    blobs = {name: checkpoint.dumps(layers) for name, layers in stages.items()}
    return RunOutcome(report, blobs, run_manifest(method, run_id, cfg, source, target, fraction, synth))


def same_domain_pair(dataset, seed):
    """Disjoint halves of one domain: a fully labeled source half and a target half."""
    order = np.random.default_rng([int(seed), 0x5A3E]).permutation(len(dataset))
    half = len(dataset) // 2
    src, tgt = dataset.subset(np.sort(order[:half])), dataset.subset(np.sort(order[half:]))
    return src, tgt


def write_outcome(out_dir, outcome):
    """Checkpoints as ``<run_id>.<stage>.aeda`` plus ``<run_id>.manifest``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_id = outcome.report.run_id
    for stage, blob in outcome.checkpoints.items():
        (out / f"{run_id}.{stage}.aeda").write_bytes(blob)
    (out / f"{run_id}.manifest").write_text(outcome.manifest)


# --- protocols ------------------------------------------------------------------


class SynthPairs:
    """Seed -> default-style synthetic pair with that seed; picklable for worker processes."""

    def __init__(self, synth=None):
        self.synth = synth or SynthConfig()
        self._last = None

    def config(self, seed):
        return replace(self.synth, seed=seed)

    def __call__(self, seed):
        if self._last is None or self._last[0] != seed:
            self._last = (seed, generate_domain_pair(self.config(seed)))
        return self._last[1]


def _pair_for(pairs, seed):
    return pairs(seed) if callable(pairs) else pairs


# source stages memoised per worker process
_PROCESS_CACHE = {}


def _job(args, cache=None):
    method, pairs, fraction, cfg, run_id = args
    source, target = _pair_for(pairs, cfg.seed)
    synth = pairs.config(cfg.seed) if isinstance(pairs, SynthPairs) else None
    cache = _PROCESS_CACHE if cache is None else cache
    return run_experiment(method, source, target, fraction, cfg, cache, run_id, synth)


def run_jobs(jobs, workers=1, writer=None, out_dir=None, cache=None, on_report=None, memo=None):
    """Execute ``(method, pairs, fraction, cfg)`` jobs; results come back in job order.

    With one worker, ``cache`` shares source stages across jobs.  With more,
    jobs are grouped by seed so each process reuses its own source stages.
    ``memo`` maps (run_id, config) to finished outcomes so protocols that
    share runs do not repeat them.
    """
    jobs = [(m, p, f, c, make_run_id(m, *_names(m, p, c.seed), f, 0.0 if m == "ablation_no_kld" else c.alpha,
                                      c.seed)) for m, p, f, c in jobs]
    if writer is not None:
        for job in jobs:
            if job[4] in writer:
                raise DuplicateRunError(f"run {job[4]!r} already reported in {writer.path}")
    outcomes = []

    def _done(outcome):
        if writer is not None:
            writer.append(outcome.report)
        if out_dir is not None:
            write_outcome(out_dir, outcome)
        if on_report is not None:
            on_report(outcome.report)
        outcomes.append(outcome)

    memo = {} if memo is None else memo
    keys = [(job[4], tuple(sorted(job[3].as_dict().items()))) for job in jobs]
    todo = [i for i, k in enumerate(keys) if k not in memo]
    if workers <= 1:
        cache = {} if cache is None else cache
        for i in todo:
            memo[keys[i]] = _job(jobs[i], cache)
    else:
        order = sorted(todo, key=lambda i: jobs[i][3].seed)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunk = max(1, len(order) // workers)
            for i, outcome in zip(order, pool.map(_job, [jobs[i] for i in order], chunksize=chunk)):
                memo[keys[i]] = outcome
    for k in keys:
        _done(memo[k])
    return [o.report for o in outcomes]


def _names(method, pairs, seed):
    source, target = _pair_for(pairs, seed)
    if method == "baseline_same_domain":
        return target.spec.name, target.spec.name
    return source.spec.name, target.spec.name


def fraction_sweep(pairs, fractions, cfg, seeds, method="aeda", **kw):
    """One run per (fraction, seed); fractions that label nothing are skipped with a warning."""
    fractions = list(fractions)
    if fractions != sorted(fractions) or any(not 0.0 < f <= 1.0 for f in fractions):
        raise ValueError("fractions must be sorted and within (0, 1]")
    jobs = []
    for f in fractions:
        for s in seeds:
            _, target = _pair_for(pairs, s)
            if labeled_count(f, len(target)) == 0:
                warnings.warn(f"fraction {f} labels no windows at seed {s}; skipped", stacklevel=2)
                continue
            jobs.append((method, pairs, f, replace(cfg, seed=s)))
    return run_jobs(jobs, **kw)


@dataclass
class AlphaSweep:
    reports: list
    means: dict
    best_alpha: float


def alpha_sweep(pairs, alphas, cfg, seeds, fraction=0.1, **kw):
    """One run per (alpha, seed); the alpha with the highest mean accuracy is flagged as best."""
    alphas = list(alphas)
    if any(a <= 0 for a in alphas):
        raise ValueError("alpha sweep values must be positive")
    jobs = [("aeda", pairs, fraction, replace(cfg, alpha=a, seed=s)) for a in alphas for s in seeds]
    reports = run_jobs(jobs, **kw)
    means = {a: m for a, (m, _, _) in summarize(reports, key=lambda r: r.alpha).items()}
    best = max(alphas, key=lambda a: (means[a], -abs(math.log10(a) + 6)))
    return AlphaSweep(reports, means, best)


@dataclass
class Ablation:
    pairs: list
    delta_mean: float
    delta_unseen_mean: float | None


def ablation(pairs, cfg, seeds, fraction=0.1, **kw):
    """Paired runs per seed, identical except alpha in {configured, 0}."""
    jobs = []
    for s in seeds:
        c = replace(cfg, seed=s)
        jobs += [("aeda", pairs, fraction, c), ("ablation_no_kld", pairs, fraction, c)]
    reports = run_jobs(jobs, **kw)
    paired = list(zip(reports[0::2], reports[1::2]))
    delta = float(np.mean([a.accuracy_overall - b.accuracy_overall for a, b in paired]))
    unseen = [a.accuracy_unseen - b.accuracy_unseen for a, b in paired
              if a.accuracy_unseen is not None and b.accuracy_unseen is not None]
    return Ablation(paired, delta, float(np.mean(unseen)) if unseen else None)


def baseline_same_domain(pairs, cfg, seeds, fraction=0.1, **kw):
    """Same-domain ceiling on the target domain of each pair."""
    return run_jobs([("baseline_same_domain", pairs, fraction, replace(cfg, seed=s)) for s in seeds], **kw)


def summarize(reports, key=lambda r: (r.method, r.labeled_fraction, r.alpha), field="accuracy_overall"):
    """key -> (mean, sample std, n); std is nan for a single run."""
    groups = {}
    for r in reports:
        v = getattr(r, field)
        if v is not None:
            groups.setdefault(key(r), []).append(v)
    out = {}
    for k, vals in groups.items():
        arr = np.asarray(vals, dtype=float)
        out[k] = (float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else float("nan"), len(arr))
    return out
