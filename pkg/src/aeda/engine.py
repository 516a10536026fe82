"""Auto-encoder domain adaptation: the four training stages and prediction.

1. train a source auto-encoder on source windows (reconstruction MSE);
2. freeze its encoder and train a classifier head on source labels;
3. train a target auto-encoder on labeled target windows with
   ``MSE + alpha * sum_l KL(ref_l || target_l)`` over the encoder conv layers;
4. freeze the target encoder, attach a copy of the head, fine-tune on the
   labeled target windows.
"""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import dataset_fingerprint
from .models import EVAL_BATCH, AutoEncoderModel, ClassifierHead, layers_digest
from .optim import Adam

logger = logging.getLogger(__name__)

ENCODER_KLD_LAYERS = ("conv1", "conv2")
DECODER_KLD_LAYERS = ("dec_conv2",)


class TrainingDiverged(RuntimeError):
    def __init__(self, stage, epoch, batch):
        super().__init__(f"{stage}: loss became non-finite at epoch {epoch}, batch {batch}")
        self.stage, self.epoch, self.batch = stage, epoch, batch


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1e-6
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 10
    learning_rate: float = 1e-3
    seed: int = 0
    b: int = 64
    c_l: int = 2
    hidden: int = 64
    val_fraction: float = 0.1
    kld_layers: str = "encoder"  # or "encoder+decoder"
    target_ae_unlabeled: bool = False
    lam: float = 1.0
    f_dim: int = 32

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        for name in ("batch_size", "b", "c_l", "hidden", "f_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.kld_layers not in ("encoder", "encoder+decoder"):
            raise ValueError(f"unknown kld_layers {self.kld_layers!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def as_dict(self):
        return asdict(self)


def stage_rng(seed, stage):
    """Independent generator for one named stage of a run."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stage.encode())])


def holdout_split(n, fraction, rng):
    """(train, validation) index arrays; tiny sets validate on their training data."""
    order = rng.permutation(n)
    n_val = int(round(fraction * n))
    if n < 2 or n_val == 0:
        return order, order
    n_val = min(n_val, n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


@dataclass
class FitResult:
    epochs: int
    best_loss: float
    history: list = field(default_factory=list)


def _snapshot(layers):
    return [(l.weights.data.copy(), l.bias.data.copy()) for l in layers]


def _restore(layers, snap):
    for layer, (w, b) in zip(layers, snap):
        layer.weights.data[...] = w
        layer.bias.data[...] = b


def fit(stage, batch_loss, val_loss, layers, n_train, cfg, rng):
    """Mini-batch Adam with patience early stopping on a held-out loss.

    The untrained state counts as epoch 0; the best-scoring weights are
    restored at the end.
    """
    trainable = [l for l in layers if not l.frozen]
    opt = Adam(trainable, lr=cfg.learning_rate)
    best = val_loss()
    if not math.isfinite(best):
        raise TrainingDiverged(stage, 0, -1)
    history = [best]
    snap = _snapshot(trainable)
    wait = 0
    epochs = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n_train)
        for bi, start in enumerate(range(0, n_train, cfg.batch_size)):
            loss = batch_loss(order[start:start + cfg.batch_size])
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(stage, epoch, bi)
            loss.backward()
            opt.step()
        epochs = epoch
        current = val_loss()
        if not math.isfinite(current):
            raise TrainingDiverged(stage, epoch, -1)
        history.append(current)
        if current < best:
            best, wait = current, 0
            snap = _snapshot(trainable)
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    _restore(trainable, snap)
    logger.info("%s: %d epochs, best held-out loss %.6g", stage, epochs, best)
    return FitResult(epochs, best, history)


# --- reference statistics ---------------------------------------------------

@dataclass(frozen=True)
class ReferenceStats:
    """Channel probability vectors of the frozen source conv layers, keyed by layer name."""

    distributions: dict

    def __post_init__(self):
        frozen = {}
        for name, p in self.distributions.items():
            p = np.array(p, dtype=np.float64)
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError(f"reference for {name} is not a probability vector")
            p.flags.writeable = False
            frozen[name] = p
        object.__setattr__(self, "distributions", frozen)

    @property
    def layers(self):
        return tuple(self.distributions)

    def __getitem__(self, name):
        return self.distributions[name]


def kld_layer_names(cfg):
    return ENCODER_KLD_LAYERS + (DECODER_KLD_LAYERS if cfg.kld_layers == "encoder+decoder" else ())


def _softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def compute_reference_stats(model, source_data, layers=ENCODER_KLD_LAYERS):
    """Per-layer softmax of channel-mean relu activations over all source windows."""
    if not model.encoder_frozen:
        raise ValueError("reference statistics need a frozen source encoder")
    windows = _windows(source_data)
    sums = {name: 0.0 for name in layers}
    counts = {name: 0 for name in layers}
    for start in range(0, len(windows), EVAL_BATCH):
        _, acts = model.forward(T.Tensor(windows[start:start + EVAL_BATCH]))
        for name in layers:
            a = acts[name].data
            sums[name] = sums[name] + a.sum(axis=(0, 2, 3))
            counts[name] += a.shape[0] * a.shape[2] * a.shape[3]
    return ReferenceStats({name: _softmax(sums[name] / counts[name]) for name in layers})


def _windows(data):
    return np.asarray(getattr(data, "windows", data), dtype=np.float64)


# --- stages -----------------------------------------------------------------

def _ae_loss(model, x, ref, alpha, layer_names):
    recon, acts = model.forward(x)
    loss = T.mse_loss(recon, x.data)
    if alpha and ref is not None:
        kl = None
        for name in layer_names:
            term = T.kld(ref[name], T.channel_distribution(acts[name]))
            kl = term if kl is None else kl + term
        loss = loss + alpha * kl
    return loss


def fit_autoencoder(model, windows, cfg, rng, stage, ref=None, alpha=0.0, layer_names=ENCODER_KLD_LAYERS):
    """Train ``model`` on ``windows`` with MSE (+ alpha-weighted KLD when ``ref`` is given)."""
    windows = _windows(windows)
    if len(windows) == 0:
        raise ValueError(f"{stage}: no windows to train on")
    train_idx, val_idx = holdout_split(len(windows), cfg.val_fraction, rng)
    val_x = windows[val_idx]

    def batch_loss(idx):
        return _ae_loss(model, T.Tensor(windows[train_idx[idx]]), ref, alpha, layer_names)

    def val_loss():
        total = 0.0
        for start in range(0, len(val_x), EVAL_BATCH):
            chunk = val_x[start:start + EVAL_BATCH]
            total += _ae_loss(model, T.Tensor(chunk), ref, alpha, layer_names).item() * len(chunk)
        return total / len(val_x)

    result = fit(stage, batch_loss, val_loss, model.layers, len(train_idx), cfg, rng)
    model.epochs_trained = result.epochs
    return result


def reconstruction_mse(model, windows):
    windows = _windows(windows)
    total = 0.0
    for start in range(0, len(windows), EVAL_BATCH):
        chunk = windows[start:start + EVAL_BATCH]
        total += T.mse_loss(model.reconstruct(T.Tensor(chunk)), chunk).item() * len(chunk)
    return total / len(windows)


def train_source_ae(source_data, cfg):
    """Stage 1: reconstruction-only training of a fresh source auto-encoder."""
    if len(source_data) == 0:
        raise ValueError("source dataset is empty")
    model = AutoEncoderModel(source_data.window_shape, cfg.b, stage_rng(cfg.seed, "src_ae.init"))
    fit_autoencoder(model, source_data, cfg, stage_rng(cfg.seed, "src_ae.train"), "src_ae")
    return model


def union_vocabulary(source_vocab, target_vocab):
    """Source labels first, then target-only labels in target order."""
    source_vocab = tuple(source_vocab)
    return source_vocab + tuple(lb for lb in target_vocab if lb not in source_vocab)


def to_union(dataset, vocabulary):
    """Re-index a dataset's labels into ``vocabulary``."""
    index = {lb: i for i, lb in enumerate(vocabulary)}
    names = dataset.spec.label_vocabulary
    try:
        table = np.array([index[lb] for lb in names], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]!r} is not in the union vocabulary") from None
    return table[dataset.labels] if len(dataset) else np.zeros(0, dtype=np.int64)


def fit_head(head, codes, labels, cfg, rng, stage, active=None):
    """Cross-entropy training of ``head`` on fixed codes.

    ``active`` restricts the softmax to a subset of output columns so the
    remaining rows receive no gradient.
    """
    if len(codes) == 0:
        raise ValueError(f"{stage}: no labeled windows to train on")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= head.n_classes:
        raise ValueError(f"{stage}: label index outside the {head.n_classes}-class vocabulary")
    if active is not None:
        active = np.asarray(active, dtype=np.int64)
        remap = np.full(head.n_classes, -1, dtype=np.int64)
        remap[active] = np.arange(len(active))
        labels = remap[labels]
        if labels.min() < 0:
            raise ValueError(f"{stage}: label outside the active classes")
    train_idx, val_idx = holdout_split(len(codes), cfg.val_fraction, rng)

    def logits(x):
        z = head(T.Tensor(x))
        return z if active is None else T.take_columns(z, active)

    def batch_loss(idx):
        rows = train_idx[idx]
        return T.cross_entropy_loss(logits(codes[rows]), labels[rows])

    def val_loss():
        return T.cross_entropy_loss(logits(codes[val_idx]), labels[val_idx]).item()

    result = fit(stage, batch_loss, val_loss, head.layers, len(train_idx), cfg, rng)
    head.epochs_trained = result.epochs
    return result


def train_source_classifier(model, source_data, cfg, vocabulary=None):
    """Stage 2: freeze the source encoder, train a head on source labels.

    The head has one output per label in ``vocabulary`` (default: the source
    vocabulary); only the source labels' rows are trained here.
    """
    vocabulary = tuple(vocabulary or source_data.spec.label_vocabulary)
    labels = to_union(source_data, vocabulary)
    model.freeze_encoder()
    head = ClassifierHead(cfg.b, len(vocabulary), stage_rng(cfg.seed, "src_clf.init"), cfg.c_l, cfg.hidden)
    src_idx = [vocabulary.index(lb) for lb in source_data.spec.label_vocabulary]
    active = None if len(src_idx) == len(vocabulary) else sorted(src_idx)
    fit_head(head, model.codes(source_data.windows), labels, cfg, stage_rng(cfg.seed, "src_clf.train"),
             "src_clf", active=active)
    return head


def train_target_ae(target_labeled, ref, cfg, unlabeled=None):
    """Stage 3: target auto-encoder with the KLD pull towards ``ref``.

    ``target_labeled`` may be a dataset (its labeled windows are used) or a
    window array.  ``unlabeled`` windows join the reconstruction set when
    ``cfg.target_ae_unlabeled`` is on.
    """
    windows = _labeled_windows(target_labeled)
    if cfg.target_ae_unlabeled and unlabeled is not None:
        windows = np.concatenate([windows, _windows(unlabeled)])
    if len(windows) == 0:
        raise ValueError("target auto-encoder needs at least one labeled window; raise the labeled fraction")
    model = AutoEncoderModel(windows.shape[1:], cfg.b, stage_rng(cfg.seed, "tgt_ae.init"))
    names = kld_layer_names(cfg)
    _check_reference(model, ref, names)
    fit_autoencoder(model, windows, cfg, stage_rng(cfg.seed, "tgt_ae.train"), "tgt_ae",
                    ref=ref, alpha=cfg.alpha, layer_names=names)
    return model


def _check_reference(model, ref, names):
    channels = {"conv1": model.conv1.weights.shape[0], "conv2": model.conv2.weights.shape[0],
                "dec_conv2": model.dec_conv2.weights.shape[0]}
    for name in names:
        if name not in ref.distributions:
            raise ValueError(f"reference statistics lack layer {name!r}")
        if len(ref[name]) != channels[name]:
            raise ValueError(f"{name}: reference has {len(ref[name])} channels, model has {channels[name]}")


def _labeled_windows(data):
    if hasattr(data, "labeled_mask"):
        return data.windows[data.labeled_mask]
    return _windows(data)


def layer_kld(model, ref, windows, names=ENCODER_KLD_LAYERS):
    """KL(ref || model) per conv layer, with the model's distribution taken over ``windows``."""
    _, acts = model.forward(T.Tensor(_windows(windows)))
    return {name: T.kld(ref[name], T.channel_distribution(acts[name])).item() for name in names}


@dataclass
class AedaPipeline:
    """Frozen target encoder followed by the fine-tuned head."""

    encoder: AutoEncoderModel
    head: ClassifierHead
    vocabulary: tuple
    source_vocabulary: tuple

    def logits(self, windows):
        windows = _windows(windows)
        if windows.shape[1:] != self.encoder.input_shape:
            raise T.ShapeError(f"pipeline expects windows of shape {self.encoder.input_shape}, "
                               f"got {windows.shape[1:]}")
        return self.head(T.Tensor(self.encoder.codes(windows))).data

    @property
    def layers(self):
        return self.encoder.encoder_layers + self.head.layers


def finetune_target(model, head, target_labeled, cfg, vocabulary, source_vocabulary=None):
    """Stage 4: freeze the target encoder and fine-tune a copy of ``head`` on labeled target windows."""
    data = target_labeled.labeled() if hasattr(target_labeled, "labeled") else target_labeled
    if len(data) == 0:
        raise ValueError("no labeled target windows to fine-tune on; raise the labeled fraction")
    model.freeze_encoder()
    tuned = head.copy()
    tuned.freeze(False)
    labels = to_union(data, vocabulary)
    fit_head(tuned, model.codes(data.windows), labels, cfg, stage_rng(cfg.seed, "finetune.train"), "finetune")
    return AedaPipeline(model, tuned, tuple(vocabulary), tuple(source_vocabulary or ()))


def predict(pipeline, windows):
    """(label indices into the pipeline vocabulary, softmax scores)."""
    z = pipeline.logits(windows)
    z = z - z.max(axis=1, keepdims=True)
    scores = np.exp(z)
    scores /= scores.sum(axis=1, keepdims=True)
    return scores.argmax(axis=1), scores


@dataclass
class SourceStage:
    model: AutoEncoderModel
    head: ClassifierHead
    ref: ReferenceStats


def source_stage_key(source, cfg, vocabulary):
    relevant = {k: v for k, v in cfg.as_dict().items() if k not in ("alpha", "target_ae_unlabeled", "lam", "f_dim")}
    return (dataset_fingerprint(source), tuple(sorted(relevant.items())), tuple(vocabulary))


def run_source_stages(source, cfg, vocabulary, cache=None):
    """Stages 1-2 plus reference statistics, memoised in ``cache`` when given.

    A cached entry is never mutated afterwards: later stages copy the head.
    """
    key = source_stage_key(source, cfg, vocabulary) if cache is not None else None
    if cache is not None and key in cache:
        return cache[key]
    model = train_source_ae(source, cfg)
    head = train_source_classifier(model, source, cfg, vocabulary)
    head.freeze()
    ref = compute_reference_stats(model, source, kld_layer_names(cfg))
    model.freeze_encoder()
    for layer in model.decoder_layers:
        layer.freeze()
    stage = SourceStage(model, head, ref)
    if cache is not None:
        cache[key] = stage
    return stage


@dataclass
class AedaRun:
    source: SourceStage
    target_model: AutoEncoderModel
    pipeline: AedaPipeline
    epochs: dict

    def checkpoints(self):
        """Stage name -> layer list, in the order they are written to disk."""
        return {
            "src_ae": self.source.model.layers,
            "src_clf": self.source.model.encoder_layers + self.source.head.layers,
            "tgt_ae": self.target_model.layers,
            "final": self.pipeline.layers,
        }

    def digests(self):
        return {k: layers_digest(v) for k, v in self.checkpoints().items()}


def run_aeda(source, target, cfg, cache=None):
    """All four stages for one source/target pair.  ``target.labeled_mask`` marks the exposed target labels."""
    vocabulary = union_vocabulary(source.spec.label_vocabulary, target.spec.label_vocabulary)
    src = run_source_stages(source, cfg, vocabulary, cache)
    labeled = target.labeled()
    tgt_model = train_target_ae(labeled, src.ref, cfg, unlabeled=target.unlabeled().windows)
    pipeline = finetune_target(tgt_model, src.head, labeled, cfg, vocabulary, source.spec.label_vocabulary)
    epochs = {
        "src_ae": src.model.epochs_trained,
        "src_clf": src.head.epochs_trained,
        "tgt_ae": tgt_model.epochs_trained,
        "finetune": pipeline.head.epochs_trained,
    }
    return AedaRun(src, tgt_model, pipeline, epochs)
