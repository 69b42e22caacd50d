import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfenet.backbone import Backbone, count_parameters
from pfenet.episodes import DatasetConfig, Episode, episode_stream, generate, split
from pfenet.experiment import eval_miou, train_model
from pfenet.model import (
    FeatureCache,
    ModelConfig,
    NonFiniteLoss,
    OptimConfig,
    PFENet,
    combine_losses,
    load_checkpoint,
    predict_from_logits,
    save_checkpoint,
    total_loss,
    train_step,
    variant_config,
)
from pfenet.prior import PriorConfig
from pfenet.tensor import ContractError, Tensor

from gradcheck import check_gradients

TINY_WIDTHS = (2, 3, 3, 2)


def tiny_model(prior="fixed-high", scales=(4, 2), path="TD", use_prior=True, c=2, seed=0):
    bb = Backbone(TINY_WIDTHS, seed=seed)
    cfg = ModelConfig(channels=c, scales=scales, path=path, use_prior=use_prior,
                      prior=PriorConfig(prior), seed=seed)
    return PFENet(bb, cfg)


def lift_biases(model, lo=0.05, hi=0.2):
    """Positive biases keep ReLU inputs away from the kink at exactly zero."""
    rng = np.random.default_rng(99)
    for p in model.trainable_parameters():
        if p.data.ndim == 1:
            p.tensor.data = rng.uniform(lo, hi, p.data.shape)


def random_features(model, b=1, k=1, hw=4, seed=0):
    rng = np.random.default_rng(seed)
    mid_c, high_c = model.backbone.mid_channels, model.backbone.high_channels
    qmid = Tensor(np.abs(rng.normal(size=(b, mid_c, hw, hw))))
    qhigh = Tensor(np.abs(rng.normal(size=(b, high_c, hw, hw))))
    smid = Tensor(np.abs(rng.normal(size=(b * k, mid_c, hw, hw))))
    shigh = Tensor(np.abs(rng.normal(size=(b * k, high_c, hw, hw))))
    masks = (rng.uniform(size=(b * k, 4 * hw, 4 * hw)) < 0.5).astype(np.uint8)
    target = (rng.uniform(size=(b, 4 * hw, 4 * hw)) < 0.4).astype(np.int64)
    return qmid, qhigh, smid, shigh, masks, target


# ---------------------------------------------------------------- loss arithmetic

def scalar(v):
    return Tensor(np.array(float(v)))


def test_loss_examples():
    assert float(combine_losses([scalar(1)] * 4, scalar(2), 1.0).data) == 3.0
    assert float(combine_losses([scalar(5), scalar(7)], scalar(2), 0.0).data) == 2.0
    assert float(combine_losses([scalar(0.75)], scalar(2), 0.5).data) == 0.5 * 0.75 + 2
    assert float(combine_losses([], scalar(2), 1.0).data) == 2.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=6), st.floats(0, 10), st.floats(0, 4))
def test_loss_formula(l1, l2, sigma):
    got = float(combine_losses([scalar(v) for v in l1], scalar(l2), sigma).data)
    acc = l1[0]
    for v in l1[1:]:
        acc = acc + v
    want = l2 if sigma == 0 else acc * (sigma / len(l1)) + l2
    assert got == want


def test_total_loss_uses_cross_entropy():
    logits = Tensor(np.zeros((1, 2, 3, 3)))
    target = np.ones((1, 3, 3), np.int64)
    assert float(total_loss(logits, [logits, logits], target).data) == pytest.approx(2 * math.log(2), abs=1e-15)


def test_model_config_checks():
    with pytest.raises(ContractError):
        ModelConfig(sigma=-1)
    with pytest.raises(ContractError):
        ModelConfig(channels=0)
    with pytest.raises(ContractError):
        variant_config(ModelConfig(), "huge", 8)


def test_variant_configs():
    base = ModelConfig()
    assert variant_config(base, "baseline", 8).scales == (8,) and not variant_config(base, "baseline", 8).use_prior
    assert variant_config(base, "prior", 8).use_prior and variant_config(base, "prior", 8).path == "NONE"
    assert variant_config(base, "fem", 8).scales == base.scales and not variant_config(base, "fem", 8).use_prior
    assert variant_config(base, "full", 8) == base


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("prior, path", [
    ("fixed-high", "TD"), ("fixed-mid", "BU_TD"), ("learnable-mid", "TD"), (None, "NONE"),
])
def test_full_loss_gradient(prior, path):
    model = tiny_model(prior or "fixed-high", path=path, use_prior=prior is not None)
    lift_biases(model)
    qmid, qhigh, smid, shigh, masks, target = random_features(model)

    def build():
        final, inter = model.forward_features(qmid, qhigh, smid, shigh, masks, 1, (16, 16))
        return total_loss(final, inter, target)

    leaves = [p.tensor for p in model.trainable_parameters()]
    assert check_gradients(build, leaves, step=1e-6) < 1e-4


def test_learnable_high_prior_gradient_reaches_stage4():
    model = tiny_model("learnable-high")
    assert model.backbone.trainable == {"stage4"}
    lift_biases(model)
    rng = np.random.default_rng(0)
    q = rng.integers(0, 256, (1, 16, 16, 3), dtype=np.uint8)
    s = rng.integers(0, 256, (1, 16, 16, 3), dtype=np.uint8)
    mask = np.zeros((1, 16, 16), np.uint8)
    mask[:, 4:12, 2:14] = 1
    target = np.zeros((1, 16, 16), np.int64)
    target[:, 6:, 6:] = 1

    def build():
        qmid, qhigh = model.encode(q)
        smid, shigh = model.encode(s)
        final, inter = model.forward_features(qmid, qhigh, smid, shigh, mask, 1, (16, 16))
        return total_loss(final, inter, target)

    stage4 = [p.tensor for p in model.backbone.trainable_parameters()]
    assert stage4
    assert check_gradients(build, stage4, step=1e-6) < 1e-4


def test_frozen_backbone_and_fixed_prior_get_no_gradient():
    model = tiny_model()
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (2, 16, 16, 3), dtype=np.uint8)
    qmid, qhigh = model.encode(imgs[:1])
    smid, shigh = model.encode(imgs[1:])
    mask = np.ones((1, 16, 16), np.uint8)
    seen = {}
    original = model._prior

    def spy(*args):
        out = original(*args)
        seen["prior"] = out
        return out

    model._prior = spy
    final, inter = model.forward_features(qmid, qhigh, smid, shigh, mask, 1, (16, 16))
    total_loss(final, inter, np.ones((1, 16, 16), np.int64)).backward()
    assert not seen["prior"].requires_grad and seen["prior"].grad is None
    assert not qmid.requires_grad and not qhigh.requires_grad
    for p in model.backbone.parameters():
        assert not p.grad.any()
    groups = model.sections()
    for name in ("reduce", "fem", "block", "head"):
        assert any(p.grad.any() for p in groups[name]), name


# ---------------------------------------------------------------- forward contracts

def test_output_shapes_and_determinism():
    model = tiny_model(scales=(4, 2, 1))
    feats = random_features(model, b=2, k=3)
    a = model.forward_features(*feats[:5], 3, (16, 16))
    b = model.forward_features(*feats[:5], 3, (16, 16))
    assert a[0].shape == (2, 2, 16, 16) and len(a[1]) == 3
    assert all(t.shape == (2, 2, 16, 16) for t in a[1])
    assert a[0].data.tobytes() == b[0].data.tobytes()


def test_zero_shot_rejected():
    model = tiny_model()
    qmid, qhigh, smid, shigh, masks, _ = random_features(model)
    with pytest.raises(ContractError):
        model.forward_features(qmid, qhigh, smid, shigh, masks, 0, (16, 16))


def test_one_shot_support_averaging_is_identity():
    model = tiny_model()
    qmid, qhigh, smid, shigh, masks, _ = random_features(model, b=1, k=1)
    single = model.forward_features(qmid, qhigh, smid, shigh, masks, 1, (16, 16))[0].data
    # two identical supports average to the same vector and the same prior
    dup = lambda t: Tensor(np.concatenate([t.data, t.data]))
    double = model.forward_features(qmid, qhigh, dup(smid), dup(shigh), np.concatenate([masks, masks]),
                                    2, (16, 16))[0].data
    np.testing.assert_allclose(single, double, atol=1e-12)


@pytest.mark.parametrize("prior", ["fixed-high", "learnable-mid"])
def test_support_permutation_invariance(prior):
    model = tiny_model(prior)
    qmid, qhigh, smid, shigh, masks, _ = random_features(model, b=2, k=4)
    base = model.forward_features(qmid, qhigh, smid, shigh, masks, 4, (16, 16))[0].data
    perm = np.concatenate([[2, 0, 3, 1], [4 + 1, 4 + 3, 4 + 0, 4 + 2]])
    take = lambda t: Tensor(t.data[perm])
    out = model.forward_features(qmid, qhigh, take(smid), take(shigh), masks[perm], 4, (16, 16))[0].data
    np.testing.assert_allclose(out, base, rtol=0, atol=1e-12)


def test_predict_from_biased_logits():
    logits = np.zeros((2, 2, 4, 4))
    logits[:, 0] = 5.0
    assert not predict_from_logits(logits).any()
    logits[0, 1, 1, 1] = 6.0
    pred = predict_from_logits(Tensor(logits))
    assert pred.sum() == 1 and set(np.unique(pred).tolist()) == {0, 1}


def conv_count(cin, cout, k):
    return cout * cin * k * k + cout


def test_parameter_count_closed_form():
    model = tiny_model(scales=(4, 2), path="TD", c=3)
    c, mid = 3, model.backbone.mid_channels
    reduce = 2 * conv_count(mid, c, 1)
    enrich = 2 * conv_count(2 * c + 1, c, 1)
    units = conv_count(c, c, 1) + conv_count(2 * c, c, 1) + 4 * conv_count(c, c, 3)
    heads = 3 * (conv_count(c, c, 3) + conv_count(c, 2, 1))
    expect = reduce + enrich + units + conv_count(2 * c, c, 1) + heads + 2 * conv_count(c, c, 3)
    assert count_parameters(model) == expect


def test_trainable_backbone_switches_prior_source():
    bb = Backbone(TINY_WIDTHS)
    model = PFENet(bb, ModelConfig(channels=2, scales=(2,), freeze_backbone=False))
    assert model.config.prior.feature_source == "learnable-high"
    assert count_parameters(model) > count_parameters(tiny_model(scales=(2,)))


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def small_setup():
    ds = generate(DatasetConfig(per_class=12, size=32))
    fold = split(12, 0)
    bb = Backbone((8, 8, 8, 8), seed=0)
    return ds, fold, bb, FeatureCache(bb, ds.images)


def test_training_rejects_test_classes(small_setup):
    ds, fold, bb, cache = small_setup
    model = PFENet(bb, ModelConfig(channels=4, scales=(4, 2)))
    ep = next(episode_stream(ds, fold, "test", 1, 0, 1))
    with pytest.raises(ContractError, match="non-training"):
        train_step(model, [ep], 0.01, OptimConfig(), fold.train_classes, cache)


def test_non_finite_loss_names_step(small_setup):
    ds, fold, bb, cache = small_setup
    model = PFENet(bb, ModelConfig(channels=4, scales=(4, 2)))
    model.head.cls.bias.tensor.data[:] = np.nan
    ep = next(episode_stream(ds, fold, "train", 1, 0, 1))
    with pytest.raises(NonFiniteLoss) as info:
        train_step(model, [ep], 0.01, OptimConfig(), fold.train_classes, cache, step=17)
    assert info.value.step == 17 and "17" in str(info.value)


def test_cached_and_direct_features_agree(small_setup):
    ds, fold, bb, cache = small_setup
    model = PFENet(bb, ModelConfig(channels=4, scales=(4, 2)))
    eps = list(episode_stream(ds, fold, "test", 2, 3, 4))
    a = model.forward(eps, cache)[0].data
    b = model.forward(eps)[0].data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_training_run(small_setup):
    ds, fold, bb, cache = small_setup
    before = bb.checksum()
    model = PFENet(bb, ModelConfig(channels=8, scales=(8, 2)))
    untrained = eval_miou(model, ds, fold, 1, 200, 5, cache)
    log = train_model(model, ds, fold, OptimConfig(base_lr=0.02, max_iter=300, batch_size=4), seed=0,
                      cache=cache)
    assert np.isfinite(log.losses).all() and len(log.losses) == 300
    assert np.mean(log.losses[-30:]) < np.mean(log.losses[:30])
    assert log.lrs[0] == 0.02 and log.lrs[-1] < log.lrs[0]
    assert bb.checksum() == before
    assert not log.classes_seen & set(fold.test_classes)
    assert eval_miou(model, ds, fold, 1, 200, 5, cache) > untrained


def test_checkpoint_roundtrip(tmp_path, small_setup):
    ds, fold, bb, cache = small_setup
    model = PFENet(bb, ModelConfig(channels=4, scales=(4, 2), path="BU", seed=3))
    save_checkpoint(model, tmp_path / "m.pfck", {"fold": 0})
    back, meta = load_checkpoint(tmp_path / "m.pfck")
    assert meta["fold"] == 0 and back.config == model.config
    assert back.backbone.checksum() == bb.checksum()
    eps = list(episode_stream(ds, fold, "test", 1, 0, 3))
    assert back.forward(eps)[0].data.tobytes() == model.forward(eps)[0].data.tobytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.pfck").write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "x.pfck")
