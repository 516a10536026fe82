from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aeda.data import DomainSpec, loads_dataset, dumps_dataset
from aeda.synth import SynthConfig, diversity_profile, domain_maps, generate_domain_pair, write_manifest

SMALL = SynthConfig(samples_per_class=20)


def recovered_latents(ds, mapping):
    """Undo tanh, then solve the known linear map by least squares; (N, latent_dim * n_w)."""
    z = np.arctanh(np.clip(ds.windows, -1 + 1e-12, 1 - 1e-12))
    flat = z.transpose(1, 0, 2).reshape(z.shape[1], -1)
    lat, *_ = np.linalg.lstsq(mapping, flat, rcond=None)
    return lat.reshape(mapping.shape[1], len(ds), -1).transpose(1, 0, 2).reshape(len(ds), -1)


@given(st.integers(0, 2**40))
@settings(max_examples=15)
def test_same_seed_bit_identical(seed):
    cfg = replace(SMALL, seed=seed)
    (s1, t1), (s2, t2) = generate_domain_pair(cfg), generate_domain_pair(cfg)
    assert dumps_dataset(s1) == dumps_dataset(s2) and dumps_dataset(t1) == dumps_dataset(t2)


def test_different_seeds_differ():
    a, _ = generate_domain_pair(SMALL)
    b, _ = generate_domain_pair(replace(SMALL, seed=1))
    assert not np.array_equal(a.windows, b.windows)


def test_default_shapes_and_vocabularies():
    src, tgt = generate_domain_pair(SMALL)
    assert src.window_shape == (20, 10) and tgt.window_shape == (32, 10)
    assert len(src) == 4 * 20 and len(tgt) == 6 * 20
    assert tgt.spec.label_vocabulary[:4] == src.spec.label_vocabulary
    assert np.all(np.abs(src.windows) < 1.5)


@pytest.mark.parametrize("seed", range(5))
def test_noiseless_class_separation(seed):
    cfg = replace(SMALL, noise_sigma=0.0, samples_per_class=3, seed=seed)
    for ds in generate_domain_pair(cfg):
        flat = ds.windows.reshape(len(ds), -1)
        dist = np.linalg.norm(flat[:, None] - flat[None], axis=-1)
        same = ds.labels[:, None] == ds.labels[None]
        assert dist[same].max() == 0.0
        assert dist[~same].min() > 0.0


def test_all_shared_gives_identical_vocabularies():
    src, tgt = generate_domain_pair(replace(SMALL, shared_classes=6))
    assert src.spec.label_vocabulary == tgt.spec.label_vocabulary
    assert diversity_profile(src, tgt)[1] == 0


@pytest.mark.parametrize("kw", [dict(latent_dim=21), dict(shared_classes=7), dict(noise_sigma=-0.1), dict(n_classes=0)])
def test_bad_configs_rejected(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)


@pytest.mark.parametrize("seed", range(3))
def test_linear_probe_transfers_across_domains(seed):
    cfg = replace(SMALL, samples_per_class=50, noise_sigma=0.1, seed=seed)
    src, tgt = generate_domain_pair(cfg)
    map_s, map_t = domain_maps(cfg)
    zs, zt = recovered_latents(src, map_s), recovered_latents(tgt, map_t)
    shared = tgt.labels < cfg.shared_classes
    # least-squares one-hot probe fitted on source latents only
    xs = np.hstack([zs, np.ones((len(zs), 1))])
    w, *_ = np.linalg.lstsq(xs, np.eye(cfg.shared_classes)[src.labels], rcond=None)
    pred = (np.hstack([zt[shared], np.ones((shared.sum(), 1))]) @ w).argmax(axis=1)
    assert (pred == tgt.labels[shared]).mean() > 0.9


@pytest.mark.parametrize("seed", range(3))
def test_noiseless_centroids_correlate_after_inversion(seed):
    cfg = replace(SMALL, samples_per_class=2, noise_sigma=0.0, seed=seed)
    src, tgt = generate_domain_pair(cfg)
    map_s, map_t = domain_maps(cfg)
    zs, zt = recovered_latents(src, map_s), recovered_latents(tgt, map_t)
    for c in range(cfg.shared_classes):
        a, b = zs[src.labels == c].mean(axis=0), zt[tgt.labels == c].mean(axis=0)
        assert np.corrcoef(a, b)[0, 1] > 0.99


def test_diversity_identical_specs():
    spec = DomainSpec("x", ["a", "b"], ["A"])
    assert diversity_profile(spec, spec) == (0, 0, "Low", "Low")


def test_diversity_thresholds_are_strict():
    src = DomainSpec("s", [f"m{i}" for i in range(3)], ["A"])
    tgt = DomainSpec("t", [f"m{i}" for i in range(3 + 15)], ["A", "B", "C", "D"])
    assert diversity_profile(src, tgt) == (15, 3, "Low", "Low")
    tgt = DomainSpec("t", [f"m{i}" for i in range(3 + 16)], ["A", "B", "C", "D", "E"])
    assert diversity_profile(src, tgt) == (16, 4, "High", "High")


def test_synthetic_pair_with_four_target_only_classes():
    src, tgt = generate_domain_pair(replace(SMALL, n_classes=8, shared_classes=4))
    unseen_f, unseen_c, sensor, klass = diversity_profile(src, tgt)
    assert (unseen_c, klass) == (4, "High")
    assert unseen_f == 32 and sensor == "High"


def test_manifest_records_every_field(tmp_path):
    cfg = replace(SMALL, noise_sigma=0.25, seed=3)
    path = tmp_path / "synth.manifest"
    write_manifest(path, cfg)
    text = path.read_text()
    assert text.startswith("[synth]\n")
    for name in SynthConfig.field_names():
        assert f"\n{name} = " in text
    assert "noise_sigma = 0.25\n" in text and "seed = 3\n" in text


def test_cache_format_round_trip():
    src, _ = generate_domain_pair(SMALL)
    back = loads_dataset(dumps_dataset(src), feature_names=src.spec.feature_names)
    assert back.windows.tobytes() == src.windows.tobytes()
