"""Class mIoU, FB-IoU and repeated-run stability statistics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor import ContractError, _check


@dataclass
class IoUAccumulator:
    """Run-level intersection/union pixel counts per class, plus pooled fg/bg counts."""

    intersection: dict[int, int] = field(default_factory=dict)
    union: dict[int, int] = field(default_factory=dict)
    fg_inter: int = 0
    fg_union: int = 0
    bg_inter: int = 0
    bg_union: int = 0
    episodes: int = 0

    def accumulate(self, pred: np.ndarray, gt: np.ndarray, cls: int) -> None:
        pred = np.asarray(pred).astype(bool)
        gt = np.asarray(gt).astype(bool)
        _check(pred.shape == gt.shape, f"prediction {pred.shape} and ground truth {gt.shape} differ")
        i = int(np.count_nonzero(pred & gt))
        u = int(np.count_nonzero(pred | gt))
        self.intersection[cls] = self.intersection.get(cls, 0) + i
        self.union[cls] = self.union.get(cls, 0) + u
        self.fg_inter += i
        self.fg_union += u
        self.bg_inter += int(np.count_nonzero(~pred & ~gt))
        self.bg_union += int(np.count_nonzero(~pred | ~gt))
        self.episodes += 1

    def merge(self, other: "IoUAccumulator") -> "IoUAccumulator":
        out = IoUAccumulator()
        for acc in (self, other):
            for c, v in acc.intersection.items():
                out.intersection[c] = out.intersection.get(c, 0) + v
            for c, v in acc.union.items():
                out.union[c] = out.union.get(c, 0) + v
            out.fg_inter += acc.fg_inter
            out.fg_union += acc.fg_union
            out.bg_inter += acc.bg_inter
            out.bg_union += acc.bg_union
            out.episodes += acc.episodes
        return out

    def iou(self, cls: int) -> float:
        u = self.union.get(cls, 0)
        if u == 0:
            raise ContractError(f"class {cls} was never observed")
        return self.intersection[cls] / u


def accumulate(acc: IoUAccumulator, pred: np.ndarray, gt: np.ndarray, cls: int) -> None:
    acc.accumulate(pred, gt, cls)


def miou(acc: IoUAccumulator, classes: Iterable[int] | None = None) -> float:
    classes = sorted(acc.union) if classes is None else list(classes)
    _check(len(classes) > 0, "no classes to average")
    return float(np.mean([acc.iou(c) for c in classes]))


def _ratio(i: int, u: int) -> float:
    return 1.0 if u == 0 else i / u


def fb_iou(acc: IoUAccumulator) -> float:
    return 0.5 * (_ratio(acc.fg_inter, acc.fg_union) + _ratio(acc.bg_inter, acc.bg_union))


@dataclass
class StabilityReport:
    values: list[float]
    episodes: int
    seeds: list[int]

    @property
    def runs(self) -> int:
        return len(self.values)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values, ddof=1)) if len(self.values) > 1 else 0.0


def stability(eval_fn: Callable[[int, int], float], runs: int, episodes: int,
              seeds: Sequence[int] | None = None) -> StabilityReport:
    """Evaluate ``eval_fn(seed, episodes)`` once per seed; report mean and sample std."""
    _check(runs >= 2, "stability needs at least two runs")
    seeds = list(seeds) if seeds is not None else list(range(runs))
    _check(len(seeds) == runs and len(set(seeds)) == runs, "need one distinct seed per run")
    return StabilityReport([float(eval_fn(s, episodes)) for s in seeds], episodes, seeds)


# ---------------------------------------------------------------- reports

REPORT_FIELDS = ("fold", "shot", "run", "seed", "episodes", "miou", "fb_iou")


def fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def write_report(path: str | Path, rows: Sequence[dict], extra: Sequence[str] = ()) -> None:
    """One row per (fold, shot, run); floats printed with fixed precision."""
    fields = list(REPORT_FIELDS) + [f for f in extra if f not in REPORT_FIELDS]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: fmt(v) if isinstance(v, float) else v for k, v in row.items()})
