"""Pretrain / train / evaluate pipelines shared by the CLI and the benchmark."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .backbone import Backbone, PretrainResult, count_parameters, pretrain
from .episodes import FoldSplit, SynthDataset, episode_stream, subset, to_input
from .metrics import IoUAccumulator, fb_iou, miou
from .model import FeatureCache, ModelConfig, OptimConfig, PFENet, train_step, variant_config
from .tensor import LrSchedule, poly_lr

logger = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    widths: tuple[int, ...] = (32, 48, 64, 64)
    epochs: int = 16
    lr: float = 0.05
    batch_size: int = 8


def pretrain_backbone(dataset: SynthDataset, fold: FoldSplit, cfg: PretrainConfig = PretrainConfig(),
                      seed: int = 0, freeze: bool = True) -> tuple[Backbone, PretrainResult]:
    """Backbone trained on samples that show base classes only."""
    idx = subset(dataset, fold.train_classes)
    bb = Backbone(cfg.widths, seed=seed)
    res = pretrain(bb, to_input(dataset.images[idx]), dataset.labels[idx], fold.test_classes, epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
                   seed=seed, freeze=freeze)
    logger.info("pretrain fold %d: loss %.3f -> %.3f, pixel acc %.3f (majority %.3f)",
                fold.fold, res.initial_loss, res.final_loss, res.pixel_accuracy, res.majority_accuracy)
    return bb, res


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    classes_seen: set[int] = field(default_factory=set)


def train_model(model: PFENet, dataset: SynthDataset, fold: FoldSplit, optim: OptimConfig,
                k: int = 1, seed: int = 0, cache: FeatureCache | None = None,
                on_step: Callable[[int, float, float], None] | None = None) -> TrainLog:
    """Episodic training for ``optim.max_iter`` steps of ``optim.batch_size`` episodes."""
    sched = LrSchedule(optim.base_lr, optim.max_iter, optim.power)
    log = TrainLog()
    bs = optim.batch_size
    for it in range(optim.max_iter):
        eps = list(episode_stream(dataset, fold, "train", k, seed, bs, start=it * bs))
        for e in eps:
            log.classes_seen.update(dataset.present(e.query_index))
            for i in e.support_indices:
                log.classes_seen.update(dataset.present(i))
        lr = poly_lr(sched, it)
        loss = train_step(model, eps, lr, optim, fold.train_classes, cache, step=it)
        log.losses.append(loss)
        log.lrs.append(lr)
        if on_step is not None:
            on_step(it, loss, lr)
    return log


def evaluate(model: PFENet, dataset: SynthDataset, fold: FoldSplit, k: int = 1,
             episodes: int = 1000, seed: int = 0, cache: FeatureCache | None = None,
             batch: int = 100) -> IoUAccumulator:
    """K-shot evaluation on the fold's test classes, pooled into one accumulator."""
    acc = IoUAccumulator()
    for lo in range(0, episodes, batch):
        eps = list(episode_stream(dataset, fold, "test", k, seed, min(batch, episodes - lo), start=lo))
        pred = model.predict(eps, cache)
        for p, e in zip(pred, eps):
            acc.accumulate(p, e.query_mask, e.cls)
    return acc


def eval_miou(model, dataset, fold, k, episodes, seed, cache=None) -> float:
    return miou(evaluate(model, dataset, fold, k, episodes, seed, cache), fold.test_classes)


# ---------------------------------------------------------------- ablation grid

@dataclass(frozen=True)
class Arm:
    """One ablation cell; single-scale variants ignore ``path`` and ``scales``."""

    variant: str
    path: str = "TD"
    scales: tuple[int, ...] = (8, 4, 2)

    @property
    def label(self) -> str:
        if self.variant in ("baseline", "prior"):
            return self.variant
        return f"{self.variant}/{self.path}/{'-'.join(map(str, self.scales))}"


def expand_arms(variants: Sequence[str], paths: Sequence[str],
                scale_sets: Sequence[Sequence[int]]) -> list[Arm]:
    """Cross product with duplicate single-scale arms collapsed."""
    arms: list[Arm] = []
    for v in variants:
        if v in ("baseline", "prior"):
            arms.append(Arm(v))
            continue
        for p in paths:
            for s in scale_sets:
                arms.append(Arm(v, p, tuple(s)))
    return arms


def arm_config(base: ModelConfig, arm: Arm, feature_size: int, seed: int) -> ModelConfig:
    cfg = replace(base, path=arm.path, scales=arm.scales, seed=seed)
    return variant_config(cfg, arm.variant, feature_size)


def run_arm(backbone: Backbone, cache: FeatureCache, dataset: SynthDataset, fold: FoldSplit,
            base: ModelConfig, arm: Arm, optim: OptimConfig, seed: int,
            shots: Sequence[int] = (1,), episodes: int = 1000,
            eval_seed: int = 1000) -> tuple[PFENet, TrainLog, list[dict]]:
    """Train one arm with ``seed`` and evaluate it for every shot count."""
    feature_size = cache.mid.shape[-1]
    model = PFENet(backbone, arm_config(base, arm, feature_size, seed))
    log = train_model(model, dataset, fold, optim, k=1, seed=seed, cache=cache)
    rows = []
    for k in shots:
        acc = evaluate(model, dataset, fold, k, episodes, eval_seed + seed, cache)
        rows.append({
            "arm": arm.label, "variant": arm.variant, "path": model.config.path,
            "scales": "-".join(map(str, model.config.scales)), "fold": fold.fold, "seed": seed,
            "shot": k, "episodes": episodes, "miou": miou(acc, fold.test_classes),
            "fb_iou": fb_iou(acc), "params": count_parameters(model),
            "final_loss": float(np.mean(log.losses[-10:])),
        })
    return model, log, rows


GRID_FIELDS = ("arm", "variant", "path", "scales", "fold", "seed", "shot", "episodes",
               "miou", "fb_iou", "params", "final_loss")


def summarize(rows: Sequence[dict], key: Sequence[str] = ("arm", "shot")) -> list[dict]:
    """Mean and sample std of mIoU per group, first-seen group order."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in key), []).append(r)
    out = []
    for k, rs in groups.items():
        vals = np.array([r["miou"] for r in rs])
        out.append({**dict(zip(key, k)), "runs": len(rs), "miou_mean": float(vals.mean()),
                    "miou_std": float(vals.std(ddof=1)) if len(rs) > 1 else 0.0})
    return out
