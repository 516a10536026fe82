import io
import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aeda import data
from aeda.data import DataError, DomainSpec, WindowedDataset

SPAN_LOG = """\
2012-01-01 00:00:01 M003 ON Sleep begin
2012-01-01 00:00:05 M002 OFF
2012-01-01 00:00:09 M003 OFF Sleep end
2012-01-01 00:00:12 T001 21.5
"""


def test_casas_line_fields():
    records, spec = data.parse_casas_log(io.StringIO("2012-01-01 00:00:01 M003 ON Sleep begin\n"))
    (rec,) = records
    assert (rec.sensor_id, rec.value, rec.activity_label) == ("M003", 1.0, "Sleep")
    assert spec.feature_names == ("M003",) and spec.label_vocabulary == ("Sleep",)


def test_span_labels_enclosed_events():
    records, spec = data.parse_casas_log(io.StringIO(SPAN_LOG))
    assert [r.activity_label for r in records] == ["Sleep", "Sleep", "Sleep", None]
    assert spec.feature_names == ("M002", "M003", "T001")
    assert records[1].timestamp - records[0].timestamp == 4_000_000


def test_tab_separated_and_fractional_seconds():
    records, _ = data.parse_casas_log(io.StringIO("2012-01-01\t00:00:01.250000\tD001\tOPEN\n"))
    assert records[0].value == 1.0 and records[0].timestamp % 1_000_000 == 250_000


def test_few_malformed_lines_are_skipped(caplog):
    good = [f"2012-01-01 00:00:{i:02d} M001 ON" for i in range(40)]
    text = "\n".join(good[:20] + ["garbage"] + good[20:])
    with caplog.at_level(logging.WARNING):
        records, _ = data.parse_casas_log(io.StringIO(text))
    assert len(records) == 40 and "malformed" in caplog.text


def test_many_malformed_lines_fail_listing_offenders():
    lines = [f"2012-01-01 00:00:{i:02d} M001 ON" for i in range(20)] + [f"bad{i}" for i in range(12)]
    with pytest.raises(DataError) as err:
        data.parse_casas_log(io.StringIO("\n".join(lines)))
    msg = str(err.value)
    assert "12 of 32" in msg
    assert all(f"'bad{i}'" in msg for i in range(10)) and "'bad10'" not in msg


def test_backwards_timestamp_is_malformed():
    lines = [f"2012-01-01 00:00:{i:02d} M001 ON" for i in range(1, 40)] + ["2012-01-01 00:00:00 M001 ON"]
    records, _ = data.parse_casas_log(io.StringIO("\n".join(lines)))
    assert len(records) == 39


def test_featurize_one_hot_and_reading():
    spec = DomainSpec("home", ["M001", "M002", "M003"], [])
    ev = [data.EventRecord(0, "M003", 1.0), data.EventRecord(1, "M001", 1.0)]
    rows = data.featurize_events(ev, spec)
    assert rows.tolist() == [[0, 0, 1], [1, 0, 0]]
    assert rows[0] @ rows[1] == 0
    records, spec = data.parse_casas_log(io.StringIO(SPAN_LOG))
    assert data.featurize_events(records[-1:], spec).tolist() == [[0.0, 0.0, 21.5]]


def test_featurize_unknown_sensor():
    spec = DomainSpec("home", ["M001"], [])
    with pytest.raises(DataError, match="M999"):
        data.featurize_events([data.EventRecord(0, "M999", 1.0)], spec)


def imu_row(label, block):
    row = [0.0, label, 100.0] + [float("nan")] * 51
    row[3:3 + len(block)] = block
    return " ".join(str(v) for v in row)


def test_imu_two_row_z_scores():
    # columns 3,4: values (1, 3) and (10, 10); mean 2 / 10, population std 1 / 0
    text = imu_row(1, [1.0, 10.0]) + "\n" + imu_row(2, [3.0, 10.0]) + "\n"
    table = data.parse_imu_csv(io.StringIO(text), (3, 5), name="hand")
    assert np.array_equal(table.mean, [2.0, 10.0]) and np.array_equal(table.std, [1.0, 0.0])
    assert table.features.tolist() == [[-1.0, 0.0], [1.0, 0.0]]
    assert table.labels == ["1", "2"] and table.spec.label_vocabulary == ("1", "2")
    assert table.spec.feature_names == ("hand_3", "hand_4")


def test_imu_hand_block_and_dropped_rows():
    rng = np.random.default_rng(0)
    rows = [imu_row(lb, list(rng.standard_normal(17))) for lb in (1, 2, 0, 3)]
    rows.insert(1, imu_row(1, [1.0, float("nan")] + [0.0] * 15))
    rows.insert(2, "1.0,2,3")  # too short
    table = data.parse_imu_csv(io.StringIO("\n".join(rows)), data.PAMAP2_IMU_COLUMNS["hand"], name="hand")
    assert table.features.shape == (4, 17)
    assert table.labels == ["1", "2", None, "3"]
    assert np.allclose(table.features.mean(axis=0), 0) and np.allclose(table.features.std(axis=0), 1)


def test_imu_comma_separated():
    text = "0,4,9,1.5,2\n0,4,9,2.5,2\n"
    table = data.parse_imu_csv(io.StringIO(text), (3, 5))
    assert table.features.tolist() == [[-1.0, 0.0], [1.0, 0.0]]


@pytest.mark.parametrize("rng_", [(5, 5), (7, 3)])
def test_imu_empty_range(rng_):
    with pytest.raises(DataError, match="empty column range"):
        data.parse_imu_csv(io.StringIO("1 2 3 4 5 6 7 8\n"), rng_)


def test_imu_domains_keep_separate_statistics():
    rng = np.random.default_rng(3)
    rows = [" ".join(str(v) for v in [0.0, 1, 90.0, *(rng.standard_normal(51) * np.arange(1, 52))])
            for _ in range(30)]
    hand = data.parse_imu_csv(io.StringIO("\n".join(rows)), data.PAMAP2_IMU_COLUMNS["hand"], name="hand")
    chest = data.parse_imu_csv(io.StringIO("\n".join(rows)), data.PAMAP2_IMU_COLUMNS["chest"], name="chest")
    assert not set(hand.spec.feature_names) & set(chest.spec.feature_names)
    assert not np.shares_memory(hand.mean, chest.mean)
    assert not np.allclose(hand.std, chest.std)


def spec_for(n_f=2, vocab=("A", "B", "C")):
    return DomainSpec("d", [f"f{i}" for i in range(n_f)], vocab)


def test_twelve_samples_three_windows():
    ds = data.make_windows(np.arange(24.0).reshape(12, 2), ["A"] * 12, spec_for())
    assert len(ds) == 3 and ds.window_shape == (2, 10)
    assert np.array_equal(ds.windows[1], np.arange(24.0).reshape(12, 2)[1:11].T)


def test_mode_label_counts():
    ds = data.make_windows(np.zeros((10, 2)), ["A", "A", "B"] + ["A"] * 4 + ["B"] * 3, spec_for())
    assert ds.label_names() == ["A"]


def test_tie_goes_to_earliest_label():
    ds = data.make_windows(np.zeros((4, 2)), ["B", "A", "A", "B"], spec_for(), n_w=4)
    assert ds.label_names() == ["B"]


def test_unlabeled_samples_do_not_vote():
    labels = [None] * 6 + ["C"] * 2 + ["A"] + [None] * 3
    ds = data.make_windows(np.zeros((12, 2)), labels, spec_for(), n_w=4, stride=4)
    # windows [0,4) all None -> dropped; [4,8) -> C; [8,12) -> A
    assert ds.label_names() == ["C", "A"]


def test_short_sequence_warns(caplog):
    with caplog.at_level(logging.WARNING):
        ds = data.make_windows(np.zeros((5, 2)), ["A"] * 5, spec_for())
    assert len(ds) == 0 and ds.window_shape == (2, 10) and "shorter" in caplog.text


def test_unknown_window_label():
    with pytest.raises(DataError):
        data.make_windows(np.zeros((3, 2)), ["Z"] * 3, spec_for(), n_w=2)


@given(st.integers(1, 60), st.integers(1, 12), st.integers(1, 7))
def test_window_count_formula(length, n_w, stride):
    ds = data.make_windows(np.zeros((length, 1)), ["A"] * length, spec_for(1), n_w=n_w, stride=stride)
    expected = (length - n_w) // stride + 1 if length >= n_w else 0
    assert len(ds) == expected


@given(st.lists(st.sampled_from("ABC"), min_size=1, max_size=15), st.randoms(use_true_random=False))
def test_mode_is_permutation_stable_without_ties(labels, rnd):
    counts = sorted((labels.count(c) for c in set(labels)), reverse=True)
    if len(counts) > 1 and counts[0] == counts[1]:
        return
    shuffled = list(labels)
    rnd.shuffle(shuffled)
    n = len(labels)
    a = data.make_windows(np.zeros((n, 1)), labels, spec_for(1), n_w=n)
    b = data.make_windows(np.zeros((n, 1)), shuffled, spec_for(1), n_w=n)
    assert a.label_names() == b.label_names()


def test_dataset_is_read_only_and_validated():
    ds = WindowedDataset(spec_for(), np.zeros((2, 2, 3)), [0, 2])
    with pytest.raises(ValueError):
        ds.windows[0, 0, 0] = 1.0
    with pytest.raises(DataError):
        WindowedDataset(spec_for(), np.zeros((2, 2, 3)), [0, 3])
    with pytest.raises(DataError):
        WindowedDataset(spec_for(), np.zeros((2, 3, 3)), [0, 1])
    with pytest.raises(DataError):
        DomainSpec("d", ["x", "x"], [])


def ones(n):
    return WindowedDataset(spec_for(1), np.zeros((n, 1, 2)), np.zeros(n, dtype=int))


@pytest.mark.parametrize("fraction,n,k", [(0.1, 1000, 100), (1.0, 37, 37), (0.1, 95, 10), (0.05, 1, 1), (0.3, 10, 3)])
def test_split_labeled_count(fraction, n, k):
    ds = data.split_labeled(ones(n), fraction, seed=4)
    assert ds.labeled_mask.sum() == k
    assert len(ds.labeled()) == k and len(ds.unlabeled()) == n - k


def test_split_labeled_deterministic():
    a = data.split_labeled(ones(200), 0.2, seed=9).labeled_mask
    b = data.split_labeled(ones(200), 0.2, seed=9).labeled_mask
    c = data.split_labeled(ones(200), 0.2, seed=10).labeled_mask
    assert np.array_equal(a, b) and not np.array_equal(a, c)


@pytest.mark.parametrize("fraction", [0.0, -0.1, 1.5])
def test_split_labeled_range(fraction):
    with pytest.raises(ValueError):
        data.split_labeled(ones(5), fraction, seed=0)


@given(st.integers(0, 2**31), st.integers(0, 6), st.integers(1, 4), st.integers(1, 5))
def test_wds_round_trip(seed, n, n_f, n_w):
    rng = np.random.default_rng(seed)
    spec = spec_for(n_f)
    ds = WindowedDataset(spec, rng.standard_normal((n, n_f, n_w)), rng.integers(0, 3, n), rng.random(n) < 0.5)
    if n == 0:
        ds = WindowedDataset(spec, np.zeros((0, n_f, n_w)), [])
    blob = data.dumps_dataset(ds)
    back = data.loads_dataset(blob, feature_names=spec.feature_names)
    assert back.spec.label_vocabulary == spec.label_vocabulary
    assert back.windows.tobytes() == ds.windows.tobytes()
    assert np.array_equal(back.labels, ds.labels) and np.array_equal(back.labeled_mask, ds.labeled_mask)
    assert data.dumps_dataset(back) == blob


def test_wds_header_and_file(tmp_path):
    ds = WindowedDataset(spec_for(2), np.ones((1, 2, 3)), [1], [False])
    path = tmp_path / "x.wds"
    data.save_dataset(path, ds)
    raw = path.read_bytes()
    assert raw.startswith(b"AEDA-WDS v1 n_f=2 n_w=3 classes=A,B,C\n")
    assert len(raw) - raw.index(b"\n") - 1 == 5 + 8 * 6
    assert data.load_dataset(path).spec.name == "x"
    with pytest.raises(DataError):
        data.loads_dataset(raw[:-1])
    with pytest.raises(DataError):
        data.loads_dataset(b"nope\n")


def test_concatenate_keeps_files_apart():
    a = data.make_windows(np.zeros((11, 2)), ["A"] * 11, spec_for())
    b = data.make_windows(np.ones((10, 2)), ["B"] * 10, spec_for())
    joined = data.concatenate([a, b])
    assert len(joined) == 3 and joined.label_names() == ["A", "A", "B"]
    other = WindowedDataset(spec_for(3), np.zeros((1, 3, 10)), [0])
    with pytest.raises(DataError):
        data.concatenate([a, other])
