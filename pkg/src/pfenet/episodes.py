"""Synthetic shape dataset, fold splits and episode sampling."""
from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .codec import read_mask, read_pgm, read_ppm, write_mask, write_pgm, write_ppm
from .tensor import ContractError, _check, resize_array

CLASS_NAMES = (
    "disk", "ring", "square", "frame", "triangle", "cross",
    "bar-h", "bar-v", "diamond", "L-shape", "T-shape", "checker-blob",
)


def _inside(name: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership of local coordinates (object spans roughly [-1,1]^2).

    Every shape covers about 1.8 square units so no class, and hence no fold,
    carries a systematically larger foreground share.
    """
    au, av = np.abs(u), np.abs(v)
    r = np.hypot(u, v)
    if name == "disk":
        return r <= 0.76
    if name == "ring":
        return (r <= 0.95) & (r >= 0.55)
    if name == "square":
        return np.maximum(au, av) <= 0.68
    if name == "frame":
        m = np.maximum(au, av)
        return (m <= 0.8) & (m >= 0.45)
    if name == "triangle":
        return (v >= -0.85) & (v <= 0.9) & (au <= 0.55 * (0.9 - v))
    if name == "cross":
        return ((au <= 0.28) & (av <= 0.95)) | ((av <= 0.28) & (au <= 0.95))
    if name == "bar-h":
        return (au <= 0.95) & (av <= 0.45)
    if name == "bar-v":
        return (au <= 0.45) & (av <= 0.95)
    if name == "diamond":
        return au + av <= 0.95
    if name == "L-shape":
        return (((u >= -0.85) & (u <= -0.2)) & (av <= 0.85)) | ((v >= 0.2) & (v <= 0.85) & (au <= 0.85))
    if name == "T-shape":
        return ((v >= -0.85) & (v <= -0.25) & (au <= 0.85)) | ((au <= 0.32) & (av <= 0.85))
    if name == "checker-blob":
        theta = np.arctan2(v, u)
        return r <= 0.78 + 0.17 * np.sin(3 * theta)
    raise ContractError(f"unknown shape {name!r}")


@dataclass(frozen=True)
class DatasetConfig:
    n_classes: int = 12
    per_class: int = 60
    size: int = 32
    seed: int = 0
    scale_range: tuple[float, float] = (0.4, 0.9)
    max_rotation: float = 30.0
    distractors: int = 1
    companions: float = 0.5
    hue_jitter: float = 0.02
    noise: float = 0.03

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(self.scale_range))
        _check(self.size % 4 == 0, f"image size {self.size} not divisible by 4")
        _check(1 <= self.n_classes <= len(CLASS_NAMES), f"n_classes must be in 1..{len(CLASS_NAMES)}")
        lo, hi = self.scale_range
        _check(0 < lo <= hi <= 1, "scale_range must satisfy 0 < lo <= hi <= 1")
        _check(0 <= self.companions <= 1, "companions must be a probability")
        _check(self.companions == 0 or self.n_classes >= 2, "companions need at least two classes")


@dataclass
class SynthDataset:
    """Images ``[N,H,W,3]`` uint8, masks ``[N,H,W]`` in {0,1}, classes ``[N]`` (1-based).

    ``labels`` is the per-pixel class map (0 = background) covering every
    class-coloured object in the image, including a companion instance of
    another class that the sample's own mask treats as background.
    """

    images: np.ndarray
    masks: np.ndarray
    classes: np.ndarray
    config: DatasetConfig = field(default_factory=DatasetConfig)
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.labels is None:
            self.labels = (self.masks * self.classes[:, None, None]).astype(np.uint8)
        self._present = [frozenset(int(c) for c in np.unique(lbl) if c) | {int(cls)}
                         for lbl, cls in zip(self.labels, self.classes)]

    @property
    def class_names(self) -> list[str]:
        return list(CLASS_NAMES[: self.config.n_classes])

    def indices_of(self, cls: int, allowed: Sequence[int] | None = None) -> np.ndarray:
        """Samples of ``cls``; with ``allowed``, only those showing no other class."""
        idx = np.flatnonzero(self.classes == cls)
        if allowed is None:
            return idx
        allowed = set(allowed)
        return np.array([i for i in idx if self._present[i] <= allowed], dtype=np.int64)

    def present(self, index: int) -> frozenset[int]:
        """Every class with pixels in sample ``index``."""
        return self._present[index]

    def __len__(self) -> int:
        return len(self.classes)


def _lowfreq(rng: np.random.Generator, size: int, grid: int = 4) -> np.ndarray:
    return resize_array(rng.uniform(-1, 1, (grid, grid)), size, size)


def class_hue(cls: int, n_classes: int) -> float:
    """Base hue of a class; a stride-5 walk so no fold owns a contiguous hue range."""
    step = 5 if n_classes % 5 else 7
    return ((cls - 1) * step % n_classes) / n_classes


def _color(hue: float, rng: np.random.Generator) -> np.ndarray:
    hue %= 1.0
    sat = rng.uniform(0.6, 1.0)
    val = rng.uniform(0.6, 1.0)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val))


def _place(rng: np.random.Generator, cfg: DatasetConfig, yy, xx):
    size = cfg.size
    lo, hi = cfg.scale_range
    half = rng.uniform(lo, hi) * size / 2
    theta = np.deg2rad(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
    cy = rng.uniform(half, size - half)
    cx = rng.uniform(half, size - half)
    dx, dy = xx - cx, yy - cy
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / half
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / half
    return u, v


def render_sample(cls: int, cfg: DatasetConfig,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Image, mask and class map with a single foreground instance of ``cls``."""
    size = cfg.size
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    gray = 0.5 + 0.25 * _lowfreq(rng, size)
    tint = np.stack([_lowfreq(rng, size) for _ in range(3)], axis=-1)
    img = gray[..., None] + 0.08 * tint
    for _ in range(cfg.distractors):
        # clutter: any shape with an arbitrary hue, so no class is systematically background
        shape = CLASS_NAMES[int(rng.integers(cfg.n_classes))]
        u, v = _place(rng, cfg, yy, xx)
        inside = _inside(shape, u, v)
        img[inside] = _fill(shape, rng.uniform(), rng, u, v)[inside]
    labels = np.zeros((size, size), dtype=np.uint8)
    if rng.uniform() < cfg.companions:
        # another class in its own colours, so the support decides what is foreground
        other = int(rng.integers(1, cfg.n_classes))
        other += other >= cls
        u, v = _place(rng, cfg, yy, xx)
        inside = _inside(CLASS_NAMES[other - 1], u, v)
        hue = class_hue(other, cfg.n_classes) + rng.uniform(-cfg.hue_jitter, cfg.hue_jitter)
        img[inside] = _fill(CLASS_NAMES[other - 1], hue, rng, u, v)[inside]
        labels[inside] = other
    mask = np.zeros((size, size), dtype=np.uint8)
    while not mask.any():
        u, v = _place(rng, cfg, yy, xx)
        mask = _inside(CLASS_NAMES[cls - 1], u, v).astype(np.uint8)
    hue = class_hue(cls, cfg.n_classes) + rng.uniform(-cfg.hue_jitter, cfg.hue_jitter)
    img[mask > 0] = _fill(CLASS_NAMES[cls - 1], hue, rng, u, v)[mask > 0]
    labels[mask > 0] = cls
    img = img + rng.normal(0.0, cfg.noise, img.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8), mask, labels


def _fill(shape: str, hue: float, rng: np.random.Generator, u, v) -> np.ndarray:
    color = _color(hue, rng)
    shade = 1.0 - 0.15 * v  # mild vertical shading
    if shape == "checker-blob":
        shade = shade * np.where((np.floor(u * 2.5) + np.floor(v * 2.5)) % 2 == 0, 1.0, 0.65)
    return np.clip(shade[..., None] * color, 0, 1)


def generate(config: DatasetConfig = DatasetConfig(), seed: int | None = None) -> SynthDataset:
    """Deterministic function of the configuration (``seed`` overrides ``config.seed``)."""
    if seed is not None:
        config = DatasetConfig(**{**asdict(config), "seed": seed})
    n = config.n_classes * config.per_class
    images = np.empty((n, config.size, config.size, 3), dtype=np.uint8)
    masks = np.empty((n, config.size, config.size), dtype=np.uint8)
    labels = np.empty((n, config.size, config.size), dtype=np.uint8)
    classes = np.repeat(np.arange(1, config.n_classes + 1), config.per_class)
    for i, cls in enumerate(classes):
        rng = np.random.default_rng([config.seed, i])
        images[i], masks[i], labels[i] = render_sample(int(cls), config, rng)
    return SynthDataset(images, masks, classes, config, labels)


def to_input(images: np.ndarray) -> np.ndarray:
    """uint8 ``[N,H,W,3]`` to float ``[N,3,H,W]`` centred on zero."""
    x = np.asarray(images, dtype=np.float64) / 255.0
    return ((x - 0.5) * 2.0).transpose(0, 3, 1, 2)


# ---------------------------------------------------------------- folds

@dataclass(frozen=True)
class FoldSplit:
    scheme: str
    fold: int
    train_classes: tuple[int, ...]
    test_classes: tuple[int, ...]

    def classes_for(self, phase: str) -> tuple[int, ...]:
        _check(phase in ("train", "test"), f"unknown phase {phase!r}")
        return self.train_classes if phase == "train" else self.test_classes


def split(n_classes: int, fold: int, scheme: str = "contiguous") -> FoldSplit:
    """Four-fold class split; classes are numbered from 1."""
    _check(fold in (0, 1, 2, 3), f"fold index must be in 0..3, got {fold}")
    _check(n_classes % 4 == 0, f"n_classes {n_classes} not divisible by 4")
    per = n_classes // 4
    if scheme == "contiguous":
        test = tuple(range(fold * per + 1, (fold + 1) * per + 1))
    elif scheme == "strided":
        test = tuple(4 * x - 3 + fold for x in range(1, per + 1))
    else:
        raise ContractError(f"unknown fold scheme {scheme!r}")
    train = tuple(c for c in range(1, n_classes + 1) if c not in test)
    return FoldSplit(scheme, fold, train, test)


# ---------------------------------------------------------------- episodes

@dataclass
class Episode:
    cls: int
    query_index: int
    support_indices: tuple[int, ...]
    query_image: np.ndarray
    query_mask: np.ndarray
    support_images: np.ndarray
    support_masks: np.ndarray

    @property
    def k(self) -> int:
        return len(self.support_indices)


def sample_episode(dataset: SynthDataset, fold: FoldSplit, phase: str, k: int,
                   rng: np.random.Generator) -> Episode:
    _check(k >= 1, "K must be at least 1")
    classes = fold.classes_for(phase)
    cls = int(classes[rng.integers(len(classes))])
    # training samples may not show any test-fold class, not even as background
    pool = dataset.indices_of(cls, fold.train_classes if phase == "train" else None)
    if len(pool) < k + 1:
        raise ContractError(f"class {cls} has {len(pool)} samples, need {k + 1}")
    chosen = rng.choice(pool, size=k + 1, replace=False)
    q, s = int(chosen[0]), tuple(int(i) for i in chosen[1:])
    return Episode(cls, q, s, dataset.images[q], dataset.masks[q],
                   dataset.images[list(s)], dataset.masks[list(s)])


def episode_stream(dataset: SynthDataset, fold: FoldSplit, phase: str, k: int,
                   seed: int, count: int, start: int = 0):
    """Episode ``i`` is drawn from its own stream keyed by ``(seed, i)``."""
    for i in range(start, start + count):
        yield sample_episode(dataset, fold, phase, k, np.random.default_rng([seed, i]))


# ---------------------------------------------------------------- directory layout

def save_dataset(dataset: SynthDataset, root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    counters: dict[int, int] = {}
    for img, msk, lbl, cls in zip(dataset.images, dataset.masks, dataset.labels, dataset.classes):
        k = counters.get(int(cls), 0)
        counters[int(cls)] = k + 1
        d = root / f"class_{int(cls)}"
        d.mkdir(exist_ok=True)
        write_ppm(d / f"img_{k}.ppm", img)
        write_mask(d / f"msk_{k}.pgm", msk)
        write_pgm(d / f"lbl_{k}.pgm", lbl)
    manifest = {
        "class_names": dataset.class_names,
        "counts": {str(c): n for c, n in sorted(counters.items())},
        "seed": dataset.config.seed,
        "config": asdict(dataset.config),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_dataset(root: str | Path) -> SynthDataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = json.loads(mpath.read_text())
    cfg = DatasetConfig(**manifest["config"])
    images, masks, labels, classes = [], [], [], []
    for cls_str, count in sorted(manifest["counts"].items(), key=lambda kv: int(kv[0])):
        for k in range(count):
            d = root / f"class_{cls_str}"
            images.append(read_ppm(d / f"img_{k}.ppm"))
            masks.append(read_mask(d / f"msk_{k}.pgm"))
            labels.append(read_pgm(d / f"lbl_{k}.pgm"))
            classes.append(int(cls_str))
    return SynthDataset(np.stack(images), np.stack(masks), np.array(classes), cfg, np.stack(labels))


def subset(dataset: SynthDataset, classes: Sequence[int]) -> np.ndarray:
    """Indices of samples that show only classes in ``classes``."""
    allowed = set(int(c) for c in classes)
    return np.array([i for i in range(len(dataset)) if dataset.present(i) <= allowed], dtype=np.int64)
