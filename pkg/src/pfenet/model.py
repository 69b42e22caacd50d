"""Full network: channel reduction, prior, FEM, conv block and classifier."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import Backbone, read_arrays, write_arrays
from .episodes import Episode, to_input
from .fem import ClassificationHead, FemState, ScaleSet, intermediate_logits
from .prior import PriorConfig, downsample_mask, prior_from_features
from .tensor import (
    ContractError,
    Conv2d,
    Parameter,
    Tensor,
    _check,
    add,
    bilinear_resize,
    group_mean,
    masked_gap,
    relu,
    repeat_batch,
    scale,
    sgd_step,
    softmax_cross_entropy,
)

VARIANTS = ("baseline", "prior", "fem", "full")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    scales: tuple[int, ...] = (8, 4, 2)
    path: str = "TD"
    use_prior: bool = True
    prior: PriorConfig = field(default_factory=PriorConfig)
    sigma: float = 1.0
    freeze_backbone: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if isinstance(self.prior, dict):
            object.__setattr__(self, "prior", PriorConfig(**self.prior))
        _check(self.sigma >= 0, "sigma must be non-negative")
        _check(self.channels >= 1, "channels must be positive")

    @property
    def scale_set(self) -> ScaleSet:
        return ScaleSet(self.scales, self.path)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d


def variant_config(base: ModelConfig, variant: str, feature_size: int) -> ModelConfig:
    """Ablation arm: the baseline runs FEM at the input feature size only."""
    _check(variant in VARIANTS, f"unknown variant {variant!r}")
    use_prior = variant in ("prior", "full")
    if variant in ("fem", "full"):
        return replace(base, use_prior=use_prior)
    return replace(base, use_prior=use_prior, scales=(feature_size,), path="NONE")


class FeatureCache:
    """Frozen backbone outputs for every image of a dataset, computed once."""

    def __init__(self, backbone: Backbone, images: np.ndarray, batch: int = 128):
        mids, highs = [], []
        for lo in range(0, len(images), batch):
            mid, high = backbone.extract(to_input(images[lo:lo + batch]))
            mids.append(mid.data)
            highs.append(high.data)
        self.mid = np.concatenate(mids)
        self.high = np.concatenate(highs)
        self.stage3_offset = backbone.widths[1]


class PFENet:
    def __init__(self, backbone: Backbone, config: ModelConfig = ModelConfig()):
        self.backbone = backbone
        if not config.freeze_backbone:
            config = replace(config, prior=replace(config.prior, feature_source="learnable-high"))
            backbone.unfreeze()
        elif config.use_prior and config.prior.feature_source == "learnable-high":
            backbone.unfreeze("stage4")
        else:
            backbone.freeze()
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config.channels
        self.down_query = Conv2d(backbone.mid_channels, c, 1, rng)
        self.down_supp = Conv2d(backbone.mid_channels, c, 1, rng)
        self.fem = FemState(c, config.scale_set, config.use_prior, rng)
        self.block = [Conv2d(c, c, 3, rng), Conv2d(c, c, 3, rng)]
        self.head = ClassificationHead(c, rng)

    # ------------------------------------------------------------ parameters

    def sections(self) -> dict[str, list[Parameter]]:
        return {
            "backbone": self.backbone.parameters(),
            "reduce": self.down_query.parameters() + self.down_supp.parameters(),
            "fem": self.fem.parameters(),
            "block": [p for conv in self.block for p in conv.parameters()],
            "head": self.head.parameters(),
        }

    def head_parameters(self) -> list[Parameter]:
        s = self.sections()
        return s["reduce"] + s["fem"] + s["block"] + s["head"]

    def trainable_parameters(self) -> list[Parameter]:
        return self.backbone.trainable_parameters() + self.head_parameters()

    # ------------------------------------------------------------ forward

    def encode(self, images: np.ndarray | None = None, indices: np.ndarray | None = None,
               cache: FeatureCache | None = None) -> tuple[Tensor, Tensor]:
        """Mid and high features for uint8 images, or cached dataset indices."""
        bb = self.backbone
        if cache is not None and indices is not None and not (bb.trainable - {"stage4"}):
            mid = Tensor(cache.mid[indices])
            if "stage4" in bb.trainable:
                return mid, bb.run_stage("stage4", Tensor(mid.data[:, cache.stage3_offset:]))
            return mid, Tensor(cache.high[indices])
        _check(images is not None, "images required when features are not cached")
        return bb.extract(to_input(images))

    def forward_features(self, qmid: Tensor, qhigh: Tensor, smid: Tensor, shigh: Tensor,
                         support_masks: np.ndarray, k: int, out_hw: tuple[int, int],
                         with_aux: bool = True) -> tuple[Tensor, list[Tensor]]:
        """Core forward on features; supports are laid out as ``[b*k, ...]``."""
        _check(k >= 1, "K must be at least 1 (zero-shot is not supported)")
        b = qmid.shape[0]
        _check(smid.shape[0] == b * k, f"expected {b * k} support features, got {smid.shape[0]}")
        h, w = qmid.shape[2:]
        H, W = out_hw
        soft = downsample_mask(np.asarray(support_masks).reshape(b * k, 1, *support_masks.shape[-2:]), h, w)
        q = relu(self.down_query(qmid))
        s = relu(self.down_supp(smid))
        svec = group_mean(masked_gap(s, soft, eps=self.config.prior.epsilon), k)
        prior = None
        if self.config.use_prior:
            prior = self._prior(q, s, qmid, qhigh, smid, shigh, soft, k)
        fem_out, refined = self.fem(q, svec, prior)
        x = relu(self.block[1](relu(self.block[0](fem_out))))
        x = add(x, fem_out)
        final = bilinear_resize(self.head(x), H, W)
        inter = intermediate_logits(refined, self.fem.heads, H, W) if with_aux else []
        return final, inter

    def _prior(self, q, s, qmid, qhigh, smid, shigh, soft, k) -> Tensor:
        cfg = self.config.prior
        if cfg.feature_source == "learnable-mid":
            xq, xs = q, s
        elif cfg.level == "high":
            xq, xs = qhigh, shigh
        else:
            xq, xs = qmid, smid
        if cfg.fixed:
            xq, xs = xq.detach(), xs.detach()
        priors = prior_from_features(repeat_batch(xq, k), xs, soft, cfg)
        return group_mean(priors, k)

    def forward(self, episodes: Episode | Sequence[Episode], cache: FeatureCache | None = None,
                with_aux: bool = True) -> tuple[Tensor, list[Tensor]]:
        """Final logits ``[b,2,H,W]`` and per-scale intermediate logits."""
        if isinstance(episodes, Episode):
            episodes = [episodes]
        _check(len(episodes) > 0, "empty episode batch")
        k = episodes[0].k
        _check(k >= 1, "K must be at least 1 (zero-shot is not supported)")
        _check(all(e.k == k for e in episodes), "mixed shot counts in one batch")
        H, W = episodes[0].query_mask.shape
        qidx = np.array([e.query_index for e in episodes])
        sidx = np.array([i for e in episodes for i in e.support_indices])
        qmid, qhigh = self.encode(np.stack([e.query_image for e in episodes]), qidx, cache)
        smid, shigh = self.encode(np.concatenate([e.support_images for e in episodes]), sidx, cache)
        smasks = np.concatenate([e.support_masks for e in episodes])
        return self.forward_features(qmid, qhigh, smid, shigh, smasks, k, (H, W), with_aux)

    def predict(self, episodes, cache: FeatureCache | None = None) -> np.ndarray:
        """Binary masks ``[b,H,W]``; query ground truth is never read."""
        final, _ = self.forward(episodes, cache, with_aux=False)
        return predict_from_logits(final)


def predict_from_logits(logits: Tensor | np.ndarray) -> np.ndarray:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (data[:, 1] > data[:, 0]).astype(np.uint8)


# ---------------------------------------------------------------- loss and training

def combine_losses(intermediate: Sequence[Tensor], final: Tensor, sigma: float) -> Tensor:
    """``sigma / n * sum(intermediate) + final``."""
    if not intermediate or sigma == 0:
        return final
    acc = intermediate[0]
    for t in intermediate[1:]:
        acc = add(acc, t)
    return add(scale(acc, sigma / len(intermediate)), final)


def total_loss(final_logits: Tensor, intermediate: Sequence[Tensor], target: np.ndarray,
               sigma: float = 1.0) -> Tensor:
    target = np.asarray(target).astype(np.int64)
    l1 = [softmax_cross_entropy(t, target) for t in intermediate]
    return combine_losses(l1, softmax_cross_entropy(final_logits, target), sigma)


@dataclass
class OptimConfig:
    base_lr: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    max_iter: int = 600
    batch_size: int = 4


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


def train_step(model: PFENet, episodes: Sequence[Episode], lr: float, optim: OptimConfig,
               train_classes: Sequence[int] | None = None, cache: FeatureCache | None = None,
               step: int = 0) -> float:
    """One SGD step on a batch of training episodes; returns the loss value."""
    if train_classes is not None:
        bad = sorted({e.cls for e in episodes} - set(train_classes))
        if bad:
            raise ContractError(f"training episode uses non-training classes {bad}")
    final, inter = model.forward(episodes, cache)
    target = np.stack([e.query_mask for e in episodes])
    loss = total_loss(final, inter, target, model.config.sigma)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteLoss(step, value)
    loss.backward()
    sgd_step(model.trainable_parameters(), lr, optim.momentum, optim.weight_decay)
    return value


def train_episode(model: PFENet, episode: Episode, lr: float, optim: OptimConfig = OptimConfig(),
                  train_classes: Sequence[int] | None = None,
                  cache: FeatureCache | None = None) -> float:
    return train_step(model, [episode], lr, optim, train_classes, cache)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"PFCK"
CKPT_VERSION = 1


def save_checkpoint(model: PFENet, path: str | Path, metadata: dict | None = None) -> None:
    """Header, JSON metadata, then a section table of weight blocks.

    Each section body uses the backbone weight-file layout (layer count, then
    per-layer shape and little-endian float64 values).
    """
    meta = {"model": model.config.to_dict(), "backbone_widths": list(model.backbone.widths)}
    meta.update(metadata or {})
    blob = json.dumps(meta, sort_keys=True).encode()
    bodies = []
    for name, params in model.sections().items():
        buf = io.BytesIO()
        write_arrays(buf, [p.data for p in params])
        bodies.append((name.encode(), buf.getvalue()))
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(bodies)))
        for name, body in bodies:
            fh.write(struct.pack("<IQ", len(name), len(body)))
            fh.write(name)
        for _, body in bodies:
            fh.write(body)


def load_checkpoint(path: str | Path) -> tuple[PFENet, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    version, mlen = struct.unpack_from("<II", data, 4)
    _check(version == CKPT_VERSION, f"{path}: unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(data[pos:pos + mlen])
    pos += mlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    table = []
    for _ in range(count):
        nlen, blen = struct.unpack_from("<IQ", data, pos)
        pos += 12
        table.append((data[pos:pos + nlen].decode(), blen))
        pos += nlen
    cfg = ModelConfig(**meta["model"])
    model = PFENet(Backbone(meta["backbone_widths"]), cfg)
    sections = model.sections()
    for name, blen in table:
        arrays = read_arrays(io.BytesIO(data[pos:pos + blen]))
        pos += blen
        params = sections[name]
        _check(len(arrays) == len(params), f"section {name}: {len(arrays)} arrays for {len(params)} params")
        for p, a in zip(params, arrays):
            _check(p.data.shape == a.shape, f"section {name}: shape mismatch {p.data.shape} vs {a.shape}")
            p.tensor.data = a
    return model, meta
