"""Training-free prior masks from query/support feature correspondence.

For each query pixel the cosine similarity to every (masked) support pixel is
reduced by max (default) or mean, and the resulting map is min-max normalised.
The mask-pooled variant compares against one masked-GAP support vector instead.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, Tensor, _check, _make, group_mean, mul_const

FEATURE_SOURCES = ("fixed-high", "fixed-mid", "learnable-high", "learnable-mid")
REDUCTIONS = ("max", "mean")
SUPPORT_REPS = ("per-pixel", "mask-pooled")


@dataclass(frozen=True)
class PriorConfig:
    feature_source: str = "fixed-high"
    reduction: str = "max"
    support_rep: str = "per-pixel"
    epsilon: float = 1e-7

    def __post_init__(self):
        _check(self.feature_source in FEATURE_SOURCES, f"unknown feature_source {self.feature_source!r}")
        _check(self.reduction in REDUCTIONS, f"unknown reduction {self.reduction!r}")
        _check(self.support_rep in SUPPORT_REPS, f"unknown support_rep {self.support_rep!r}")
        _check(self.epsilon > 0, "epsilon must be positive")

    @property
    def fixed(self) -> bool:
        return self.feature_source.startswith("fixed")

    @property
    def level(self) -> str:
        return self.feature_source.split("-")[1]


@dataclass
class PriorMask:
    values: np.ndarray  # [1,1,h,w], in [0,1]
    config: PriorConfig


def downsample_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Area-average a ``[..., H, W]`` binary mask down to ``[..., h, w]``."""
    mask = np.asarray(mask, dtype=np.float64)
    H, W = mask.shape[-2:]
    if H % h or W % w:
        raise ContractError(f"mask size {H}x{W} is not a multiple of feature size {h}x{w}")
    fy, fx = H // h, W // w
    return mask.reshape(mask.shape[:-2] + (h, fy, w, fx)).mean(axis=(-3, -1))


def mask_support_features(xs_raw: Tensor, support_mask: np.ndarray) -> Tensor:
    """Zero out background support features with the area-averaged mask."""
    h, w = xs_raw.shape[2:]
    m = downsample_mask(support_mask, h, w)
    m = m.reshape((xs_raw.shape[0], 1, h, w))
    return mul_const(xs_raw, m)


def _unit(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalise columns of ``[b,c,n]``; zero vectors stay zero."""
    norm = np.sqrt((v * v).sum(axis=1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, v / safe, 0.0), norm


def _unit_backward(dn: np.ndarray, n: np.ndarray, norm: np.ndarray) -> np.ndarray:
    safe = np.where(norm > 0, norm, 1.0)
    proj = (n * dn).sum(axis=1, keepdims=True)
    return np.where(norm > 0, (dn - n * proj) / safe, 0.0)


def correspondence(xq: np.ndarray, xs_masked: np.ndarray, reduction: str = "max") -> np.ndarray:
    """Reduced cosine correspondence ``[b, hw]`` between query and masked support pixels."""
    xq, xs_masked = np.asarray(xq, float), np.asarray(xs_masked, float)
    _check(xq.shape == xs_masked.shape, f"feature shapes differ: {xq.shape} vs {xs_masked.shape}")
    b, c = xq.shape[:2]
    qn, _ = _unit(xq.reshape(b, c, -1))
    sn, _ = _unit(xs_masked.reshape(b, c, -1))
    cos = np.einsum("bcq,bcs->bqs", qn, sn)
    return cos.max(axis=-1) if reduction == "max" else cos.mean(axis=-1)


def normalize(cq: np.ndarray, h: int, w: int, epsilon: float = 1e-7,
              config: PriorConfig | None = None) -> PriorMask:
    """Min-max normalise a length-``hw`` correspondence vector into a prior mask."""
    y = np.asarray(cq, dtype=np.float64).reshape(1, 1, h, w)
    y = (y - y.min()) / (y.max() - y.min() + epsilon)
    return PriorMask(y, config or PriorConfig(epsilon=epsilon))


def prior_from_features(xq: Tensor, xs_raw: Tensor, soft_mask: np.ndarray,
                        config: PriorConfig) -> Tensor:
    """Batched prior ``[b,1,h,w]`` from query and unmasked support features.

    ``soft_mask`` is the support mask already reduced to feature resolution,
    shape ``[b,1,h,w]``. The result is differentiable w.r.t. both feature inputs
    when they carry gradients (learnable feature sources); otherwise constant.
    """
    b, c, h, w = xq.shape
    _check(xs_raw.shape == xq.shape, f"feature shapes differ: {xq.shape} vs {xs_raw.shape}")
    m = np.asarray(soft_mask, dtype=np.float64).reshape(b, 1, h * w)
    eps = config.epsilon
    Q = xq.data.reshape(b, c, h * w)
    Sraw = xs_raw.data.reshape(b, c, h * w)
    pooled = config.support_rep == "mask-pooled"
    if pooled:
        denom = m.sum(axis=2, keepdims=True) + eps
        S = (Sraw * m).sum(axis=2, keepdims=True) / denom
    else:
        S = Sraw * m
    qn, qnorm = _unit(Q)
    sn, snorm = _unit(S)
    cos = np.einsum("bcq,bcs->bqs", qn, sn)
    if config.reduction == "max":
        arg = cos.argmax(axis=-1)
        cq = np.take_along_axis(cos, arg[..., None], axis=-1)[..., 0]
    else:
        cq = cos.mean(axis=-1)
    lo_i, hi_i = cq.argmin(axis=1), cq.argmax(axis=1)
    lo = cq[np.arange(b), lo_i][:, None]
    hi = cq[np.arange(b), hi_i][:, None]
    D = hi - lo + eps
    y = (cq - lo) / D

    def backward(g):
        dy = g.reshape(b, h * w)
        dc = dy / D
        rel = (cq - lo) / D ** 2
        dlo = (dy * (-1.0 / D + rel)).sum(axis=1)
        dhi = -(dy * rel).sum(axis=1)
        dc[np.arange(b), lo_i] += dlo
        dc[np.arange(b), hi_i] += dhi
        if config.reduction == "max":
            dcos = np.zeros_like(cos)
            np.put_along_axis(dcos, arg[..., None], dc[..., None], axis=-1)
        else:
            dcos = np.broadcast_to(dc[..., None] / cos.shape[-1], cos.shape)
        dqn = np.einsum("bcs,bqs->bcq", sn, dcos)
        dsn = np.einsum("bcq,bqs->bcs", qn, dcos)
        dQ = _unit_backward(dqn, qn, qnorm)
        dS = _unit_backward(dsn, sn, snorm)
        if pooled:
            dSraw = dS * m / denom
        else:
            dSraw = dS * m
        return dQ.reshape(xq.shape), dSraw.reshape(xs_raw.shape)

    return _make(y.reshape(b, 1, h, w), (xq, xs_raw), backward)


def average_priors(masks: Sequence[PriorMask]) -> PriorMask:
    """Element-wise mean of K prior masks (no renormalisation)."""
    _check(len(masks) >= 1, "need at least one prior mask")
    cfg = masks[0].config
    shape = masks[0].values.shape
    for m in masks[1:]:
        _check(m.config == cfg, "cannot average priors generated with different configs")
        _check(m.values.shape == shape, "prior shapes differ")
    stacked = np.concatenate([m.values for m in masks], axis=0)
    return PriorMask(group_mean(Tensor(stacked), len(masks)).data, cfg)


FeatureFn = Callable[[Tensor], Tensor]


def generate_prior(backbone, query_image: np.ndarray, support_image: np.ndarray,
                   support_mask: np.ndarray, config: PriorConfig = PriorConfig(),
                   reducers: tuple[FeatureFn, FeatureFn] | None = None) -> PriorMask:
    """End-to-end prior for one query/support pair; the result is detached.

    Images are ``[3,H,W]`` (or ``[1,3,H,W]``) float arrays and the support mask is
    ``[H,W]`` binary. For ``learnable-mid`` the mid-level features pass through
    ``reducers = (query_fn, support_fn)`` first.
    """
    q = np.asarray(query_image, dtype=np.float64).reshape((1,) + np.shape(query_image)[-3:])
    s = np.asarray(support_image, dtype=np.float64).reshape((1,) + np.shape(support_image)[-3:])
    qmid, qhigh = backbone.extract(q)
    smid, shigh = backbone.extract(s)
    if config.level == "high":
        xq, xs = qhigh, shigh
    else:
        xq, xs = qmid, smid
        if config.feature_source == "learnable-mid":
            _check(reducers is not None, "learnable-mid priors need the channel-reduction convs")
            xq, xs = reducers[0](xq), reducers[1](xs)
    h, w = xq.shape[2:]
    m = downsample_mask(np.asarray(support_mask).reshape((1, 1) + np.shape(support_mask)[-2:]), h, w)
    y = prior_from_features(Tensor(xq.data), Tensor(xs.data), m, config)
    return PriorMask(y.data, config)
