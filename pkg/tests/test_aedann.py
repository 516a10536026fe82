from dataclasses import replace

import numpy as np
import pytest

from aeda import aedann, engine
from aeda import tensor as T
from aeda.data import split_labeled
from aeda.engine import TrainConfig
from aeda.models import AutoEncoderModel, layers_digest
from aeda.synth import SynthConfig, generate_domain_pair

SYNTH = SynthConfig(n_classes=4, shared_classes=3, latent_dim=4, n_f_source=10, n_f_target=12,
                    samples_per_class=40)
CFG = TrainConfig(max_epochs=15, patience=5, batch_size=32, b=16, hidden=16, f_dim=16)


@pytest.fixture(scope="module")
def trained():
    src, tgt = generate_domain_pair(SYNTH)
    tgt = split_labeled(tgt, 0.3, seed=1)
    run = engine.run_aeda(src, tgt, CFG)
    digests = (run.source.model.fingerprint(), run.target_model.fingerprint())
    result = aedann.train_aedann(src, tgt, run.source.model, run.target_model, CFG)
    return src, tgt, run, result, digests


def test_encoders_stay_frozen(trained):
    _, _, run, _, digests = trained
    assert (run.source.model.fingerprint(), run.target_model.fingerprint()) == digests
    assert run.source.model.encoder_frozen and run.target_model.encoder_frozen


def test_network_shapes(trained):
    _, _, run, result, _ = trained
    net = result.network
    assert net.feature.weights.shape == (CFG.f_dim, CFG.b)
    assert net.label.weights.shape == (4, CFG.f_dim)
    assert net.domain_out.weights.shape == (2, CFG.f_dim)
    assert result.vocabulary == run.pipeline.vocabulary
    with pytest.raises(T.ShapeError):
        net.features(np.zeros((1, CFG.b + 1)))


def test_route_tags_each_sample_once():
    codes, tags = aedann.route(np.ones((3, 4)), np.zeros((2, 4)))
    assert codes.shape == (5, 4) and tags.tolist() == [0, 0, 0, 1, 1]
    assert np.array_equal(codes[tags == aedann.SOURCE], np.ones((3, 4)))


@pytest.mark.parametrize("n_src,n_tgt,batch", [(100, 7, 32), (10, 50, 4), (33, 33, 128)])
def test_batches_are_half_and_half(n_src, n_tgt, batch):
    seen = []
    for _, s, t in aedann._batches(n_src, n_tgt, batch, np.random.default_rng(0)):
        assert len(s) == len(t) <= batch // 2
        assert t.max() < n_tgt
        seen.extend(s)
    assert sorted(seen) == list(range(n_src))


def test_zero_lambda_gives_no_domain_gradient():
    rng = np.random.default_rng(0)
    net = aedann.DannNetwork(8, 3, rng, f_dim=6, lam=0.0)
    codes, tags = aedann.route(rng.standard_normal((4, 8)), rng.standard_normal((4, 8)))
    T.cross_entropy_loss(net.domain_logits(net.features(codes)), tags).backward()
    assert np.all(net.feature.weights.grad == 0) and np.all(net.feature.bias.grad == 0)
    assert np.any(net.domain_out.weights.grad != 0)


def test_reversal_flips_domain_gradient():
    rng = np.random.default_rng(1)
    codes, tags = aedann.route(rng.standard_normal((4, 8)), rng.standard_normal((4, 8)))
    grads = {}
    for lam in (1.0, -1.0):
        net = aedann.DannNetwork(8, 3, np.random.default_rng(2), f_dim=6)
        feats = net.features(codes)
        if lam > 0:
            logits = net.domain_logits(feats, lam=1.0)
        else:
            logits = net.domain_head(feats)
        T.cross_entropy_loss(logits, tags).backward()
        grads[lam] = net.feature.weights.grad.copy()
    assert np.allclose(grads[1.0], -grads[-1.0], rtol=0, atol=1e-15)


def test_bottleneck_mismatch(trained):
    src, tgt, run, _, _ = trained
    other = AutoEncoderModel(tgt.window_shape, CFG.b * 2, np.random.default_rng(0))
    with pytest.raises(ValueError, match="bottleneck"):
        aedann.train_aedann(src, tgt, run.source.model, other, CFG)


def test_prediction_deterministic_and_batch_invariant(trained):
    _, tgt, run, result, _ = trained
    windows = tgt.windows[:11]
    a, sa = aedann.predict_aedann(result.network, run.target_model, windows)
    b, sb = aedann.predict_aedann(result.network, run.target_model, windows)
    single = np.concatenate([aedann.predict_aedann(result.network, run.target_model, windows[i:i + 1])[1]
                             for i in range(11)])
    assert np.array_equal(a, b) and np.array_equal(sa, sb)
    assert np.allclose(sa, single, rtol=0, atol=1e-12)
    with pytest.raises(T.ShapeError):
        aedann.predict_aedann(result.network, run.target_model, np.zeros((1, 3, 10)))


def test_above_chance_and_close_to_aeda(trained):
    _, tgt, run, result, _ = trained
    rest = tgt.unlabeled()
    truth = engine.to_union(rest, result.vocabulary)
    acc_dann = np.mean(aedann.predict_aedann(result.network, run.target_model, rest.windows)[0] == truth)
    acc_aeda = np.mean(engine.predict(run.pipeline, rest.windows)[0] == truth)
    assert acc_dann > 1 / 4
    assert acc_dann >= acc_aeda - 0.10


def test_same_seed_same_network(trained):
    src, tgt, run, result, _ = trained
    again = aedann.train_aedann(src, tgt, run.source.model, run.target_model, CFG)
    assert aedann.network_digest(again.network) == aedann.network_digest(result.network)


def test_domain_separability_of_unrelated_codes():
    rng = np.random.default_rng(3)
    src = rng.standard_normal((80, 6)) + 3.0
    tgt = rng.standard_normal((80, 6)) - 3.0
    cfg = replace(CFG, max_epochs=40, learning_rate=1e-2)
    assert aedann.domain_separability(src[:60], tgt[:60], cfg, src[60:], tgt[60:]) == 1.0
    net = aedann.DannNetwork(6, 2, np.random.default_rng(0), f_dim=4)
    assert 0.0 <= aedann.domain_accuracy(net, src, tgt) <= 1.0


def test_empty_target_rejected(trained):
    src, tgt, run, _, _ = trained
    nothing = replace(tgt, labeled_mask=np.zeros(len(tgt), dtype=bool))
    with pytest.raises(ValueError, match="labeled fraction"):
        aedann.train_aedann(src, nothing, run.source.model, run.target_model, CFG)


def test_layers_digest_covers_all_parts(trained):
    net = trained[3].network
    assert aedann.network_digest(net) == layers_digest(net.layers) and len(net.layers) == 4
