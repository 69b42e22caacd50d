import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfenet.backbone import Backbone
from pfenet.prior import (
    FEATURE_SOURCES,
    PriorConfig,
    PriorMask,
    average_priors,
    correspondence,
    downsample_mask,
    generate_prior,
    mask_support_features,
    normalize,
    prior_from_features,
)
from pfenet.tensor import ContractError, Conv2d, Tensor, relu

from gradcheck import check_gradients
from oracles import oracle_prior

ALL_CONFIGS = [PriorConfig(src, red, rep) for src, red, rep in
               itertools.product(FEATURE_SOURCES, ("max", "mean"), ("per-pixel", "mask-pooled"))]


@pytest.fixture(scope="module")
def tiny():
    bb = Backbone((4, 5, 6, 4), seed=7)
    rng = np.random.default_rng(3)
    red_q, red_s = Conv2d(11, 6, 1, rng), Conv2d(11, 6, 1, rng)
    reducers = (lambda x: relu(red_q(x)), lambda x: relu(red_s(x)))
    return bb, reducers


def random_case(rng, size=16):
    q = rng.uniform(-1, 1, (3, size, size))
    s = rng.uniform(-1, 1, (3, size, size))
    mask = (rng.uniform(size=(size, size)) < rng.uniform(0.1, 0.9)).astype(np.uint8)
    return q, s, mask


@pytest.mark.parametrize("cfg", ALL_CONFIGS, ids=lambda c: f"{c.feature_source}-{c.reduction}-{c.support_rep}")
def test_generate_prior_matches_brute_force(tiny, cfg):
    bb, reducers = tiny
    rng = np.random.default_rng(ALL_CONFIGS.index(cfg))
    worst = 0.0
    for _ in range(50):
        q, s, mask = random_case(rng)
        got = generate_prior(bb, q, s, mask, cfg, reducers=reducers if cfg.feature_source == "learnable-mid" else None)
        if cfg.feature_source == "learnable-mid":
            xq = reducers[0](bb.extract(q[None])[0]).data[0]
            xs = reducers[1](bb.extract(s[None])[0]).data[0]
        else:
            idx = 1 if cfg.level == "high" else 0
            xq, xs = bb.extract(q[None])[idx].data[0], bb.extract(s[None])[idx].data[0]
        want = oracle_prior(xq, xs, mask, cfg.reduction, cfg.support_rep == "mask-pooled")
        assert got.values.shape == (1, 1, 4, 4)
        worst = max(worst, float(np.abs(got.values[0, 0] - want).max()))
    assert worst < 1e-6


def test_learnable_mid_needs_reducers(tiny):
    bb, _ = tiny
    q, s, mask = random_case(np.random.default_rng(0))
    with pytest.raises(ContractError):
        generate_prior(bb, q, s, mask, PriorConfig("learnable-mid"))


def test_generate_prior_is_detached(tiny):
    bb, _ = tiny
    q, s, mask = random_case(np.random.default_rng(1))
    bb.unfreeze("stage4")
    try:
        out = generate_prior(bb, q, s, mask, PriorConfig("learnable-high"))
    finally:
        bb.freeze()
    assert isinstance(out.values, np.ndarray) and isinstance(out, PriorMask)


# ---------------------------------------------------------------- worked examples

def test_two_pixel_correspondence_example():
    xq = np.array([[1.0, 0.0], [0.0, 1.0]]).T.reshape(1, 2, 1, 2)
    xs = np.array([[1.0, 0.0], [1 / math.sqrt(2), 1 / math.sqrt(2)]]).T.reshape(1, 2, 1, 2)
    cq = correspondence(xq, xs, "max")
    np.testing.assert_allclose(cq[0], [1.0, 0.70711], atol=1e-5)
    y = normalize(cq[0], 1, 2).values.ravel()
    assert y[0] == pytest.approx(1.0, abs=1e-6) and y[1] == 0.0


def test_normalize_examples():
    assert normalize(np.array([2.0, 2.0]), 1, 2).values.ravel().tolist() == [0.0, 0.0]
    y = normalize(np.array([0.0, 1.0]), 1, 2).values.ravel()
    assert y[0] == 0.0 and y[1] == 1 / (1 + 1e-7)


def test_empty_support_gives_zero_correspondence():
    xq = np.random.default_rng(0).uniform(size=(1, 3, 2, 2))
    assert not correspondence(xq, np.zeros_like(xq)).any()


def test_mask_support_examples():
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 2, 2, 2)))
    assert not mask_support_features(x, np.zeros((4, 4))).data.any()
    np.testing.assert_array_equal(mask_support_features(x, np.ones((4, 4))).data, x.data)
    half = np.zeros((4, 4))
    half[0, 0] = half[1, 0] = 1  # left column of the top-left 2x2 block
    out = mask_support_features(x, half).data
    np.testing.assert_allclose(out[0, :, 0, 0], 0.5 * x.data[0, :, 0, 0])
    assert not out[0, :, 1:, :].any() and not out[0, :, 0, 1].any()


def test_downsample_requires_integer_factor():
    with pytest.raises(ContractError):
        downsample_mask(np.ones((5, 5)), 2, 2)


def test_self_match_scores_live_pixels_at_maximum(tiny):
    bb, _ = tiny
    q, _, _ = random_case(np.random.default_rng(5))
    out = generate_prior(bb, q, q, np.ones((16, 16)), PriorConfig())
    # each non-zero query pixel finds itself in the support; zero-feature pixels score 0
    live = bb.extract(q[None])[1].data[0].any(axis=0)
    np.testing.assert_allclose(out.values[0, 0][live], 1 / (1 + 1e-7), atol=1e-9)
    assert not out.values[0, 0][~live].any()


def test_average_priors_examples():
    cfg = PriorConfig()
    a = PriorMask(np.array([0.0, 1.0]).reshape(1, 1, 1, 2), cfg)
    b = PriorMask(np.array([1.0, 0.0]).reshape(1, 1, 1, 2), cfg)
    np.testing.assert_array_equal(average_priors([a]).values, a.values)
    np.testing.assert_array_equal(average_priors([a, b]).values.ravel(), [0.5, 0.5])
    with pytest.raises(ContractError):
        average_priors([a, PriorMask(b.values, PriorConfig(reduction="mean"))])


def test_config_validation():
    with pytest.raises(ContractError):
        PriorConfig(epsilon=0.0)
    with pytest.raises(ContractError):
        PriorConfig(feature_source="learnable-low")


# ---------------------------------------------------------------- invariants

feature_cases = st.tuples(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 4),
                          st.sampled_from(ALL_CONFIGS))


def _features(seed, c, h, zero_frac=0.3):
    rng = np.random.default_rng(seed)
    xq = np.maximum(rng.normal(size=(2, c, h, h)), 0)
    xs = np.maximum(rng.normal(size=(2, c, h, h)), 0)
    xq[rng.uniform(size=xq.shape) < zero_frac] = 0
    mask = rng.uniform(size=(2, 1, h, h)) * (rng.uniform(size=(2, 1, h, h)) < 0.6)
    return xq, xs, mask


@settings(max_examples=150, deadline=None)
@given(feature_cases)
def test_values_in_unit_interval(case):
    seed, c, h, cfg = case
    xq, xs, mask = _features(seed, c, h)
    y = prior_from_features(Tensor(xq), Tensor(xs), mask, cfg).data
    assert np.isfinite(y).all()
    assert y.min() >= 0.0 and y.max() <= 1.0


@settings(max_examples=150, deadline=None)
@given(feature_cases)
def test_zero_support_mask_gives_zero_prior(case):
    seed, c, h, cfg = case
    xq, xs, _ = _features(seed, c, h)
    y = prior_from_features(Tensor(xq), Tensor(xs), np.zeros((2, 1, h, h)), cfg).data
    assert not y.any()


@settings(max_examples=150, deadline=None)
@given(feature_cases)
def test_constant_correspondence_gives_zero_prior(case):
    seed, c, h, cfg = case
    rng = np.random.default_rng(seed)
    v = np.abs(rng.normal(size=(1, c, 1, 1))) + 0.1
    # every query pixel is a positive multiple of one vector, so every cosine is identical
    xq = v * rng.uniform(0.5, 2.0, size=(2, 1, h, h))
    xs = v * rng.uniform(0.5, 2.0, size=(2, 1, h, h))
    mask = np.ones((2, 1, h, h))
    y = prior_from_features(Tensor(xq), Tensor(xs), mask, cfg).data
    # cosines agree to rounding; the epsilon in the denominator keeps the result at ~0
    assert np.abs(y).max() < 1e-6


@settings(max_examples=150, deadline=None)
@given(feature_cases)
def test_max_reduction_invariant_to_support_permutation(case):
    seed, c, h, cfg = case
    cfg = PriorConfig(cfg.feature_source, "max", cfg.support_rep)
    xq, xs, mask = _features(seed, c, h)
    perm = np.random.default_rng(seed + 1).permutation(h * h)
    xs_p = xs.reshape(2, c, -1)[:, :, perm].reshape(xs.shape)
    mask_p = mask.reshape(2, 1, -1)[:, :, perm].reshape(mask.shape)
    a = prior_from_features(Tensor(xq), Tensor(xs), mask, cfg).data
    b = prior_from_features(Tensor(xq), Tensor(xs_p), mask_p, cfg).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_max_invariant_to_support_permutation_without_moving_mask():
    # for max reduction the masked support set is what matters; permuting masked features is enough
    rng = np.random.default_rng(0)
    xq = rng.uniform(size=(1, 4, 3, 3))
    xs_masked = rng.uniform(size=(1, 4, 3, 3))
    perm = rng.permutation(9)
    xs_p = xs_masked.reshape(1, 4, -1)[:, :, perm].reshape(xs_masked.shape)
    np.testing.assert_allclose(correspondence(xq, xs_masked), correspondence(xq, xs_p), atol=1e-15)


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("cfg", [c for c in ALL_CONFIGS if c.feature_source == "learnable-high"],
                         ids=lambda c: f"{c.reduction}-{c.support_rep}")
@pytest.mark.parametrize("seed", range(3))
def test_prior_gradient_matches_finite_differences(cfg, seed):
    rng = np.random.default_rng(seed)
    xq = Tensor(rng.uniform(0.1, 1.0, (2, 3, 3, 3)), requires_grad=True)
    xs = Tensor(rng.uniform(0.1, 1.0, (2, 3, 3, 3)), requires_grad=True)
    mask = rng.uniform(size=(2, 1, 3, 3))
    err = check_gradients(lambda: prior_from_features(xq, xs, mask, cfg), [xq, xs], step=1e-6)
    assert err < 1e-4


def test_fixed_prior_is_constant_on_tape():
    rng = np.random.default_rng(0)
    xq = Tensor(rng.uniform(size=(1, 2, 2, 2)))
    xs = Tensor(rng.uniform(size=(1, 2, 2, 2)))
    y = prior_from_features(xq, xs, np.ones((1, 1, 2, 2)), PriorConfig())
    assert not y.requires_grad
