"""Sensor-log parsing, sliding windows and labeled/unlabeled splits.

Two input families are handled: CASAS-style ambient event logs (one sensor
event per line) and PAMAP2-style IMU tables (one sample per row).  Both end
up as a :class:`WindowedDataset` of ``n_f x n_w`` windows.
"""
from __future__ import annotations

import logging
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import datetime

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 10
DEFAULT_STRIDE = 1
MAX_MALFORMED_FRACTION = 0.05

# 0-based column blocks of one IMU inside a PAMAP2 protocol row
# (timestamp, activityID, heart rate, then 17 columns per IMU).
PAMAP2_IMU_COLUMNS = {
    "hand": (3, 20),
    "chest": (20, 37),
    "ankle": (37, 54),
}
PAMAP2_LABEL_COLUMN = 1
PAMAP2_UNLABELED = ("0",)

_BINARY_VALUES = {
    "ON": 1.0, "OFF": 0.0,
    "OPEN": 1.0, "CLOSE": 0.0, "CLOSED": 0.0,
    "PRESENT": 1.0, "ABSENT": 0.0,
}
_EPOCH = datetime(1970, 1, 1)
_SPLIT = re.compile(r"[ \t]+")


class DataError(ValueError):
    """Input data cannot be turned into a dataset."""


@dataclass(frozen=True)
class EventRecord:
    timestamp: int  # microseconds since epoch, naive local time
    sensor_id: str
    value: float
    activity_label: str | None = None


@dataclass(frozen=True)
class DomainSpec:
    name: str
    feature_names: tuple
    label_vocabulary: tuple

    def __post_init__(self):
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "label_vocabulary", tuple(self.label_vocabulary))
        if len(set(self.feature_names)) != len(self.feature_names):
            raise DataError(f"duplicate feature names in domain {self.name!r}")
        if len(set(self.label_vocabulary)) != len(self.label_vocabulary):
            raise DataError(f"duplicate labels in domain {self.name!r}")

    @property
    def n_features(self):
        return len(self.feature_names)


@dataclass(frozen=True, eq=False)
class WindowedDataset:
    """Windows of shape (n_f, n_w) with label indices and a labeled mask.

    The arrays are made read-only on construction.
    """

    spec: DomainSpec
    windows: np.ndarray
    labels: np.ndarray
    labeled_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        windows = np.ascontiguousarray(self.windows, dtype=np.float64)
        if windows.ndim != 3:
            if windows.size == 0:
                windows = windows.reshape(0, self.spec.n_features, 0)
            else:
                raise DataError(f"windows must be (N, n_f, n_w), got {windows.shape}")
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        mask = (np.ones(len(labels), dtype=bool) if self.labeled_mask is None
                else np.asarray(self.labeled_mask, dtype=bool).reshape(-1))
        if not (len(windows) == len(labels) == len(mask)):
            raise DataError(f"length mismatch: {len(windows)} windows, {len(labels)} labels, {len(mask)} mask")
        if len(windows) and windows.shape[1] != self.spec.n_features:
            raise DataError(f"windows have {windows.shape[1]} features, domain has {self.spec.n_features}")
        if len(labels) and (labels.min() < 0 or labels.max() >= len(self.spec.label_vocabulary)):
            raise DataError("label index outside the domain's label vocabulary")
        for arr in (windows, labels, mask):
            arr.flags.writeable = False
        object.__setattr__(self, "windows", windows)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "labeled_mask", mask)

    def __len__(self):
        return len(self.labels)

    @property
    def window_shape(self):
        return tuple(self.windows.shape[1:])

    def subset(self, idx):
        idx = np.asarray(idx)
        return WindowedDataset(self.spec, self.windows[idx], self.labels[idx], self.labeled_mask[idx])

    def labeled(self):
        return self.subset(np.flatnonzero(self.labeled_mask))

    def unlabeled(self):
        return self.subset(np.flatnonzero(~self.labeled_mask))

    def label_names(self):
        vocab = self.spec.label_vocabulary
        return [vocab[i] for i in self.labels]


def _parse_timestamp(date, time):
    dt = datetime.fromisoformat(f"{date} {time}")
    delta = dt - _EPOCH
    return (delta.days * 86400 + delta.seconds) * 1_000_000 + delta.microseconds


def _parse_value(raw):
    upper = raw.upper()
    if upper in _BINARY_VALUES:
        return _BINARY_VALUES[upper]
    value = float(raw)
    if not math.isfinite(value):
        raise ValueError(f"non-finite reading {raw!r}")
    return value


def parse_casas_log(stream, name="casas"):
    """Parse a CASAS event log into records and an inferred domain spec.

    Each line is ``date time sensor value [activity begin|end]``.  Events
    between an activity's ``begin`` and ``end`` markers carry that activity.
    Malformed lines are skipped; more than 5% of them is an error.
    """
    records = []
    bad = []
    open_spans = []
    total = 0
    last_ts = None
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        total += 1
        parts = _SPLIT.split(line)
        try:
            if len(parts) not in (4, 6):
                raise ValueError("expected 4 or 6 fields")
            ts = _parse_timestamp(parts[0], parts[1])
            if last_ts is not None and ts < last_ts:
                raise ValueError("timestamp goes backwards")
            value = _parse_value(parts[3])
            marker = None
            if len(parts) == 6:
                marker = parts[5].lower()
                if marker not in ("begin", "end"):
                    raise ValueError(f"bad span marker {parts[5]!r}")
        except ValueError as exc:
            bad.append((lineno, line, str(exc)))
            continue
        last_ts = ts
        if marker == "begin":
            open_spans.append(parts[4])
        label = open_spans[-1] if open_spans else None
        if marker == "end":
            activity = parts[4]
            label = activity if activity in open_spans else label
            if activity in open_spans:
                # close the most recent span of that activity
                del open_spans[len(open_spans) - 1 - open_spans[::-1].index(activity)]
        records.append(EventRecord(ts, parts[2], value, label))

    if total and len(bad) > MAX_MALFORMED_FRACTION * total:
        listing = "\n".join(f"  line {n}: {text!r} ({why})" for n, text, why in bad[:10])
        raise DataError(f"{len(bad)} of {total} lines malformed in {name!r}; first offenders:\n{listing}")
    if bad:
        logger.warning("skipped %d malformed lines in %s", len(bad), name)

    sensors = sorted({r.sensor_id for r in records})
    labels = sorted({r.activity_label for r in records if r.activity_label is not None})
    return records, DomainSpec(name, sensors, labels)


def featurize_events(events, spec):
    """One row per event: the firing sensor's slot holds its reading, the rest are zero."""
    slot = {s: i for i, s in enumerate(spec.feature_names)}
    out = np.zeros((len(events), len(slot)))
    for row, ev in enumerate(events):
        try:
            out[row, slot[ev.sensor_id]] = ev.value
        except KeyError:
            raise DataError(f"sensor {ev.sensor_id!r} is not in domain {spec.name!r}") from None
    return out


@dataclass
class ImuTable:
    """z-normalised IMU samples with per-column statistics."""

    features: np.ndarray
    labels: list
    mean: np.ndarray
    std: np.ndarray
    spec: DomainSpec


def parse_imu_csv(stream, column_range, label_column=PAMAP2_LABEL_COLUMN, name="imu",
                  unlabeled=PAMAP2_UNLABELED):
    """Read one IMU's column block from a PAMAP2-style table.

    Rows with a missing or NaN entry in the block (or label) are dropped.
    Labels listed in ``unlabeled`` become ``None``.  Constant columns
    normalise to zero.
    """
    start, end = column_range
    if end <= start:
        raise DataError(f"empty column range [{start}, {end})")
    rows = []
    labels = []
    for line in stream:
        line = line.strip()
        if not line:
            continue
        parts = re.split(r"[,\s]+", line)
        if len(parts) < max(end, label_column + 1):
            continue
        try:
            vals = np.array([float(v) for v in parts[start:end]])
        except ValueError:
            continue
        raw_label = parts[label_column]
        if not np.all(np.isfinite(vals)) or raw_label.lower() == "nan":
            continue
        if raw_label.endswith(".0"):
            raw_label = raw_label[:-2]
        rows.append(vals)
        labels.append(None if raw_label in unlabeled else raw_label)
    if not rows:
        raise DataError(f"no usable rows in columns [{start}, {end}) of {name!r}")
    x = np.vstack(rows)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    safe = np.where(std > 0, std, 1.0)
    z = np.where(std > 0, (x - mean) / safe, 0.0)
    vocab = sorted({lb for lb in labels if lb is not None}, key=_natural_key)
    spec = DomainSpec(name, [f"{name}_{c}" for c in range(start, end)], vocab)
    return ImuTable(z, labels, mean, std, spec)


def _natural_key(s):
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


def _mode_label(window_labels):
    votes = Counter(lb for lb in window_labels if lb is not None)
    if not votes:
        return None
    top = max(votes.values())
    for lb in window_labels:
        if lb is not None and votes[lb] == top:
            return lb


def make_windows(features, labels, spec, n_w=DEFAULT_WINDOW, stride=DEFAULT_STRIDE):
    """Slide an ``n_w`` window with ``stride`` over one contiguous sequence.

    Window label is the most frequent non-None sample label, ties going to
    the tied label seen first in the window.  Windows with no labeled
    samples are dropped.
    """
    if n_w < 1 or stride < 1:
        raise DataError(f"window and stride must be >= 1, got {n_w}, {stride}")
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != spec.n_features:
        raise DataError(f"features must be (L, {spec.n_features}), got {features.shape}")
    if len(labels) != len(features):
        raise DataError(f"{len(features)} samples but {len(labels)} labels")
    index = {lb: i for i, lb in enumerate(spec.label_vocabulary)}
    length = len(features)
    if length < n_w:
        logger.warning("sequence of %d samples is shorter than window %d; no windows", length, n_w)
        return WindowedDataset(spec, np.zeros((0, spec.n_features, n_w)), [])
    windows, out_labels = [], []
    for start in range(0, length - n_w + 1, stride):
        lb = _mode_label(labels[start:start + n_w])
        if lb is None:
            continue
        if lb not in index:
            raise DataError(f"label {lb!r} is not in the vocabulary of {spec.name!r}")
        windows.append(features[start:start + n_w].T)
        out_labels.append(index[lb])
    if not windows:
        return WindowedDataset(spec, np.zeros((0, spec.n_features, n_w)), [])
    return WindowedDataset(spec, np.stack(windows), out_labels)


def concatenate(datasets):
    """Join datasets of one domain (e.g. several log files) without windows crossing files."""
    datasets = list(datasets)
    spec = datasets[0].spec
    if any(d.spec != spec for d in datasets):
        raise DataError("cannot concatenate datasets from different domains")
    return WindowedDataset(
        spec,
        np.concatenate([d.windows for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        np.concatenate([d.labeled_mask for d in datasets]),
    )


def labeled_count(fraction, n):
    # round first so 0.1 * 1000 style products don't ceil up on float noise
    return min(n, math.ceil(round(fraction * n, 9)))


def split_labeled(dataset, fraction, seed):
    """Mark exactly ceil(fraction * N) windows as labeled, chosen by a seeded shuffle."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"labeled fraction must be in (0, 1], got {fraction}")
    n = len(dataset)
    k = labeled_count(fraction, n)
    order = np.random.default_rng(seed).permutation(n)
    mask = np.zeros(n, dtype=bool)
    mask[order[:k]] = True
    return replace(dataset, labeled_mask=mask)


# --- windowed-dataset cache -------------------------------------------------

WDS_MAGIC = "AEDA-WDS v1"
_HEADER = re.compile(r"^AEDA-WDS v1 n_f=(\d+) n_w=(\d+) classes=(.*)$")


def dumps_dataset(dataset):
    vocab = dataset.spec.label_vocabulary
    if any("," in c or "\n" in c for c in vocab):
        raise DataError("class names may not contain commas or newlines")
    n_f = dataset.spec.n_features
    n_w = dataset.windows.shape[2]
    head = f"{WDS_MAGIC} n_f={n_f} n_w={n_w} classes={','.join(vocab)}\n".encode()
    parts = [head]
    for x, lb, m in zip(dataset.windows, dataset.labels, dataset.labeled_mask):
        parts.append(struct.pack("<IB", int(lb), 1 if m else 0))
        parts.append(np.ascontiguousarray(x, dtype="<f8").tobytes())
    return b"".join(parts)


def loads_dataset(blob, name="dataset", feature_names=None):
    newline = blob.find(b"\n")
    match = _HEADER.match(blob[:newline].decode()) if newline >= 0 else None
    if match is None:
        raise DataError("missing AEDA-WDS v1 header")
    n_f, n_w = int(match.group(1)), int(match.group(2))
    classes = [c for c in match.group(3).split(",") if c] if match.group(3) else []
    record = 5 + 8 * n_f * n_w
    body = blob[newline + 1:]
    if len(body) % record:
        raise DataError("truncated windowed-dataset record")
    count = len(body) // record
    dt = np.dtype([("label", "<u4"), ("flag", "u1"), ("x", "<f8", (n_f, n_w))])
    recs = np.frombuffer(body, dtype=dt, count=count)
    names = feature_names or [f"f{i:03d}" for i in range(n_f)]
    spec = DomainSpec(name, names, classes)
    return WindowedDataset(spec, recs["x"].astype(np.float64), recs["label"].astype(np.int64),
                           recs["flag"].astype(bool))


def save_dataset(path, dataset):
    with open(path, "wb") as fh:
        fh.write(dumps_dataset(dataset))


def load_dataset(path, name=None, feature_names=None):
    from pathlib import Path

    path = Path(path)
    with open(path, "rb") as fh:
        return loads_dataset(fh.read(), name=name or path.stem, feature_names=feature_names)


def dataset_fingerprint(dataset):
    """SHA-256 of the dataset's cache-file bytes."""
    import hashlib

    return hashlib.sha256(dumps_dataset(dataset)).hexdigest()
