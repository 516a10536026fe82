"""Domain-adversarial head on top of two frozen heterogeneous encoders.

Source windows go through the source encoder and target windows through
the target encoder; the resulting codes share one feature extractor, a
label predictor and (behind a gradient-reversal junction) a domain
classifier.  Both encoders stay frozen, so their codes are computed once.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .engine import (
    TrainingDiverged,
    _restore,
    _snapshot,
    holdout_split,
    stage_rng,
    to_union,
    union_vocabulary,
)
from .models import layers_digest
from .optim import Adam, init_dense

logger = logging.getLogger(__name__)

SOURCE, TARGET = 0, 1


class DannNetwork:
    """Feature extractor, label predictor and domain classifier."""

    def __init__(self, bottleneck, n_classes, rng, f_dim=32, lam=1.0):
        self.bottleneck = bottleneck
        self.n_classes = n_classes
        self.lam = lam
        self.feature = init_dense(rng, bottleneck, f_dim)
        self.label = init_dense(rng, f_dim, n_classes)
        self.domain_hidden = init_dense(rng, f_dim, f_dim)
        self.domain_out = init_dense(rng, f_dim, 2)
        self.epochs_trained = 0

    @property
    def layers(self):
        return [self.feature, self.label, self.domain_hidden, self.domain_out]

    def features(self, codes):
        codes = T.as_tensor(codes)
        if codes.shape[-1] != self.bottleneck:
            raise T.ShapeError(f"feature extractor expects width {self.bottleneck}, got {codes.shape[-1]}")
        return T.relu(T.dense(codes, self.feature))

    def label_logits(self, feats):
        return T.dense(feats, self.label)

    def domain_head(self, feats):
        return T.dense(T.relu(T.dense(feats, self.domain_hidden)), self.domain_out)

    def domain_logits(self, feats, lam=None):
        """Domain classifier behind the gradient-reversal junction."""
        lam = self.lam if lam is None else lam
        return self.domain_head(T.gradient_reversal(feats, lam))


@dataclass
class AedannResult:
    network: DannNetwork
    vocabulary: tuple
    epochs: int


def route(src_codes, tgt_codes):
    """Stack codes from the two encoders into one batch with domain tags."""
    codes = np.concatenate([src_codes, tgt_codes])
    tags = np.concatenate([np.full(len(src_codes), SOURCE), np.full(len(tgt_codes), TARGET)])
    return codes, tags


def _batches(n_src, n_tgt, batch_size, rng):
    """Half-source, half-target batches covering the source set once; target indices cycle."""
    half = max(1, batch_size // 2)
    src_order = rng.permutation(n_src)
    tgt_stream = np.concatenate([rng.permutation(n_tgt) for _ in range(-(-n_src // n_tgt))])
    for bi, start in enumerate(range(0, n_src, half)):
        s = src_order[start:start + half]
        yield bi, s, tgt_stream[start:start + len(s)]


def train_aedann(source_data, target_labeled, src_encoder, tgt_encoder, cfg, vocabulary=None, lam=None):
    """Adversarial training of a fresh :class:`DannNetwork` on frozen encoder codes.

    Loss per batch: label cross-entropy over all samples plus domain
    cross-entropy through the reversal junction.  Early stopping watches the
    held-out label loss.
    """
    if src_encoder.bottleneck != tgt_encoder.bottleneck:
        raise ValueError(f"encoder bottlenecks differ: {src_encoder.bottleneck} vs {tgt_encoder.bottleneck}")
    src_encoder.freeze_encoder()
    tgt_encoder.freeze_encoder()
    target = target_labeled.labeled() if hasattr(target_labeled, "labeled") else target_labeled
    if len(target) == 0:
        raise ValueError("no labeled target windows; raise the labeled fraction")
    vocabulary = tuple(vocabulary or union_vocabulary(source_data.spec.label_vocabulary,
                                                      target.spec.label_vocabulary))
    lam = cfg.lam if lam is None else lam
    rng = stage_rng(cfg.seed, "aedann.train")
    net = DannNetwork(src_encoder.bottleneck, len(vocabulary), stage_rng(cfg.seed, "aedann.init"), cfg.f_dim, lam)

    hs, ys = src_encoder.codes(source_data.windows), to_union(source_data, vocabulary)
    ht, yt = tgt_encoder.codes(target.windows), to_union(target, vocabulary)
    s_tr, s_val = holdout_split(len(hs), cfg.val_fraction, rng)
    t_tr, t_val = holdout_split(len(ht), cfg.val_fraction, rng)
    val_codes, val_tags = route(hs[s_val], ht[t_val])
    val_labels = np.concatenate([ys[s_val], yt[t_val]])

    def val_loss():
        feats = net.features(val_codes)
        return T.cross_entropy_loss(net.label_logits(feats), val_labels).item()

    opt = Adam(net.layers, lr=cfg.learning_rate)
    best = val_loss()
    snap, wait, epochs = _snapshot(net.layers), 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        for bi, s, t in _batches(len(s_tr), len(t_tr), cfg.batch_size, rng):
            codes, tags = route(hs[s_tr[s]], ht[t_tr[t]])
            labels = np.concatenate([ys[s_tr[s]], yt[t_tr[t]]])
            feats = net.features(codes)
            loss = T.cross_entropy_loss(net.label_logits(feats), labels) + \
                T.cross_entropy_loss(net.domain_logits(feats), tags)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged("aedann", epoch, bi)
            loss.backward()
            opt.step()
        epochs = epoch
        current = val_loss()
        if not math.isfinite(current):
            raise TrainingDiverged("aedann", epoch, -1)
        if current < best:
            best, wait, snap = current, 0, _snapshot(net.layers)
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    _restore(net.layers, snap)
    net.epochs_trained = epochs
    logger.info("aedann: %d epochs, best held-out label loss %.6g", epochs, best)
    return AedannResult(net, vocabulary, epochs)


def predict_aedann(network, tgt_encoder, windows):
    """Target windows -> target encoder -> features -> labels; returns (indices, softmax scores)."""
    windows = np.asarray(getattr(windows, "windows", windows), dtype=np.float64)
    if windows.shape[1:] != tgt_encoder.input_shape:
        raise T.ShapeError(f"expected windows of shape {tgt_encoder.input_shape}, got {windows.shape[1:]}")
    z = network.label_logits(network.features(tgt_encoder.codes(windows))).data
    z = z - z.max(axis=1, keepdims=True)
    scores = np.exp(z)
    scores /= scores.sum(axis=1, keepdims=True)
    return scores.argmax(axis=1), scores


def domain_accuracy(network, src_codes, tgt_codes):
    """Class-balanced accuracy of the domain classifier (mean of per-domain hit rates)."""
    hits = []
    for codes, tag in ((src_codes, SOURCE), (tgt_codes, TARGET)):
        pred = network.domain_logits(network.features(codes)).data.argmax(axis=1)
        hits.append(float(np.mean(pred == tag)))
    return 0.5 * (hits[0] + hits[1])


def domain_separability(src_codes, tgt_codes, cfg, eval_src, eval_tgt):
    """Held-out accuracy of a domain classifier trained without any reversal.

    A fresh network's feature extractor and domain classifier are trained
    on the domain task alone; this is how separable the two encoders'
    codes are before adversarial alignment.
    """
    rng = stage_rng(cfg.seed, "aedann.probe")
    net = DannNetwork(src_codes.shape[1], 2, stage_rng(cfg.seed, "aedann.probe.init"), cfg.f_dim, lam=0.0)
    opt = Adam([net.feature, net.domain_hidden, net.domain_out], lr=cfg.learning_rate)
    for _ in range(cfg.max_epochs):
        for _, s, t in _batches(len(src_codes), len(tgt_codes), cfg.batch_size, rng):
            codes, tags = route(src_codes[s], tgt_codes[t])
            loss = T.cross_entropy_loss(net.domain_head(net.features(codes)), tags)
            loss.backward()
            opt.step()
    hits = []
    for codes, tag in ((eval_src, SOURCE), (eval_tgt, TARGET)):
        pred = net.domain_head(net.features(codes)).data.argmax(axis=1)
        hits.append(float(np.mean(pred == tag)))
    return 0.5 * (hits[0] + hits[1])


def network_digest(network):
    return layers_digest(network.layers)
