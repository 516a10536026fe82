"""Paired heterogeneous synthetic domains with a shared latent activity structure.

Every class owns a smooth latent trajectory (``latent_dim x n_w``).  A domain
sees it through its own random linear map into ``n_f`` features followed by
``tanh`` and white noise.  Shared classes use the same trajectories in both
domains; target-only classes get fresh ones.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import DomainSpec, WindowedDataset

SENSOR_DIVERSITY_THRESHOLD = 15
CLASS_DIVERSITY_THRESHOLD = 3
N_SINUSOIDS = 3


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 6
    shared_classes: int = 4
    latent_dim: int = 8
    n_f_source: int = 20
    n_f_target: int = 32
    n_w: int = 10
    samples_per_class: int = 300
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_classes", "shared_classes", "latent_dim", "n_f_source", "n_f_target", "n_w",
                     "samples_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.shared_classes > self.n_classes:
            raise ValueError("shared_classes cannot exceed n_classes")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.latent_dim > min(self.n_f_source, self.n_f_target):
            raise ValueError(
                f"latent_dim {self.latent_dim} exceeds the smaller feature count "
                f"{min(self.n_f_source, self.n_f_target)}; the domain maps would be rank-deficient"
            )

    def manifest(self):
        return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n"
                       for k, v in asdict(self).items())

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def _rng(seed, stream):
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stream.encode())])


def class_prototypes(cfg, n_prototypes, rng):
    """(n_prototypes, latent_dim, n_w) trajectories, each row a sum of three sinusoids."""
    t = np.arange(cfg.n_w) / cfg.n_w
    freq = rng.uniform(0.25, 1.5, size=(n_prototypes, cfg.latent_dim, N_SINUSOIDS))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(n_prototypes, cfg.latent_dim, N_SINUSOIDS))
    waves = np.sin(2.0 * np.pi * freq[..., None] * t + phase[..., None])
    return waves.sum(axis=2) / np.sqrt(N_SINUSOIDS)


def domain_map(rng, n_f, latent_dim):
    return rng.normal(0.0, 1.0 / np.sqrt(latent_dim), size=(n_f, latent_dim))


def _render(prototypes, mapping, classes, cfg, rng):
    clean = np.tanh(np.einsum("fl,clw->cfw", mapping, prototypes[classes]))
    windows = np.repeat(clean, cfg.samples_per_class, axis=0)
    if cfg.noise_sigma > 0:
        windows = windows + cfg.noise_sigma * rng.standard_normal(windows.shape)
    labels = np.repeat(np.arange(len(classes)), cfg.samples_per_class)
    return windows, labels


def generate_domain_pair(cfg):
    """Return (source, target) :class:`WindowedDataset` s for ``cfg``.

    The source holds the shared classes; the target holds shared plus
    target-only classes, with shared classes first in its vocabulary.
    """
    names = [f"act{c}" for c in range(cfg.n_classes)]
    prototypes = class_prototypes(cfg, cfg.n_classes, _rng(cfg.seed, "prototypes"))
    map_s = domain_map(_rng(cfg.seed, "map-source"), cfg.n_f_source, cfg.latent_dim)
    map_t = domain_map(_rng(cfg.seed, "map-target"), cfg.n_f_target, cfg.latent_dim)

    src_classes = np.arange(cfg.shared_classes)
    tgt_classes = np.arange(cfg.n_classes)
    xs, ys = _render(prototypes, map_s, src_classes, cfg, _rng(cfg.seed, "noise-source"))
    xt, yt = _render(prototypes, map_t, tgt_classes, cfg, _rng(cfg.seed, "noise-target"))

    src_spec = DomainSpec("synth-src", [f"s{i:03d}" for i in range(cfg.n_f_source)], names[:cfg.shared_classes])
    tgt_spec = DomainSpec("synth-tgt", [f"t{i:03d}" for i in range(cfg.n_f_target)], names)
    return WindowedDataset(src_spec, xs, ys), WindowedDataset(tgt_spec, xt, yt)


def domain_maps(cfg):
    """The (source, target) latent-to-feature matrices used by :func:`generate_domain_pair`."""
    return (domain_map(_rng(cfg.seed, "map-source"), cfg.n_f_source, cfg.latent_dim),
            domain_map(_rng(cfg.seed, "map-target"), cfg.n_f_target, cfg.latent_dim))


def diversity_tags(unseen_features, unseen_classes):
    sensor = "High" if unseen_features > SENSOR_DIVERSITY_THRESHOLD else "Low"
    klass = "High" if unseen_classes > CLASS_DIVERSITY_THRESHOLD else "Low"
    return sensor, klass


def diversity_profile(source, target):
    """Count target features and classes the source never saw, and tag them High/Low.

    Accepts datasets or :class:`DomainSpec` s.
    """
    s = getattr(source, "spec", source)
    t = getattr(target, "spec", target)
    unseen_f = len(set(t.feature_names) - set(s.feature_names))
    unseen_c = len(set(t.label_vocabulary) - set(s.label_vocabulary))
    sensor, klass = diversity_tags(unseen_f, unseen_c)
    return unseen_f, unseen_c, sensor, klass


def write_manifest(path, cfg):
    with open(path, "w") as fh:
        fh.write("[synth]\n")
        fh.write(cfg.manifest())
