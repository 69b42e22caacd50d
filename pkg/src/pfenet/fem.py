"""Feature Enrichment Module.

Query features are pooled to several spatial sizes, fused with the broadcast
support vector and the resized prior at each size, refined along an
inter-scale path by residual merging units, then resized back and fused.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .tensor import (
    Conv2d,
    Parameter,
    Tensor,
    _check,
    adaptive_avg_pool,
    add,
    bilinear_resize,
    concat,
    relu,
    tile_spatial,
)

PATHS = ("TD", "BU", "TD_BU", "BU_TD", "NONE")


@dataclass(frozen=True)
class ScaleSet:
    sizes: tuple[int, ...] = (8, 4, 2)
    path: str = "TD"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        _check(len(sizes) >= 1, "scale set is empty")
        _check(all(a > b for a, b in zip(sizes, sizes[1:])), f"scales {sizes} not strictly descending")
        _check(sizes[-1] >= 1, "scales must be positive")
        _check(self.path in PATHS, f"unknown path {self.path!r}")

    @property
    def n(self) -> int:
        return len(self.sizes)


class PathStep(NamedTuple):
    stage: int          # 0 for the first pass, 1 for the second pass of TD_BU / BU_TD
    main: int           # scale index (0 = finest)
    aux: int | None


def _single_pass(kind: str, n: int, stage: int) -> list[PathStep]:
    if kind == "TD":
        return [PathStep(stage, i, i - 1 if i > 0 else None) for i in range(n)]
    if kind == "BU":
        return [PathStep(stage, i, i + 1 if i < n - 1 else None) for i in reversed(range(n))]
    return [PathStep(stage, i, None) for i in range(n)]


def schedule_path(scales: ScaleSet) -> list[PathStep]:
    """Ordered merge steps for the scale set's interaction path."""
    n = scales.n
    if scales.path in ("TD_BU", "BU_TD"):
        first, second = scales.path.split("_")
        return _single_pass(first, n, 0) + _single_pass(second, n, 1)
    return _single_pass(scales.path, n, 0)


class MergeUnit:
    """Residual inter-scale merge: ``beta(alpha(main [+ aux])) + main``.

    ``alpha`` is a 1x1 conv + ReLU over the main feature (concatenated with the
    resized auxiliary feature when one exists); ``beta`` is two 3x3 conv + ReLU.
    """

    def __init__(self, c: int, with_aux: bool, rng: np.random.Generator):
        self.c = c
        self.with_aux = with_aux
        self.alpha = Conv2d(2 * c if with_aux else c, c, 1, rng)
        self.beta = [Conv2d(c, c, 3, rng), Conv2d(c, c, 3, rng)]

    def parameters(self) -> list[Parameter]:
        return self.alpha.parameters() + [p for conv in self.beta for p in conv.parameters()]

    def __call__(self, main: Tensor, aux: Tensor | None = None) -> Tensor:
        _check(main.shape[1] == self.c, f"merge unit expects {self.c} channels, got {main.shape[1]}")
        _check((aux is not None) == self.with_aux, "aux presence does not match merge unit")
        x = main
        if aux is not None:
            x = concat([main, bilinear_resize(aux, *main.shape[2:])])
        x = relu(self.alpha(x))
        for conv in self.beta:
            x = relu(conv(x))
        return add(x, main)


def merge(main: Tensor, aux: Tensor | None, unit: MergeUnit) -> Tensor:
    return unit(main, aux)


class ClassificationHead:
    """3x3 conv + ReLU followed by a 1x1 conv to ``classes`` logits."""

    def __init__(self, c: int, rng: np.random.Generator, classes: int = 2):
        self.conv = Conv2d(c, c, 3, rng)
        self.cls = Conv2d(c, classes, 1, rng)

    def parameters(self) -> list[Parameter]:
        return self.conv.parameters() + self.cls.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        return self.cls(relu(self.conv(x)))


def project_sources(xq: Tensor, xs_vec: Tensor, prior: Tensor | None,
                    scales: ScaleSet) -> list[tuple[Tensor, Tensor, Tensor | None]]:
    h, w = xq.shape[2:]
    _check(scales.sizes[0] <= min(h, w),
           f"largest scale {scales.sizes[0]} exceeds feature size {h}x{w}")
    out = []
    for size in scales.sizes:
        q = adaptive_avg_pool(xq, size)
        s = tile_spatial(xs_vec, size, size)
        y = bilinear_resize(prior, size, size) if prior is not None else None
        out.append((q, s, y))
    return out


def enrich_scale(q: Tensor, s: Tensor, y: Tensor | None, conv: Conv2d) -> Tensor:
    _check(q.shape[2:] == s.shape[2:] and (y is None or y.shape[2:] == q.shape[2:]),
           "inter-source inputs differ in spatial size")
    parts = [q, s] if y is None else [q, s, y]
    return relu(conv(concat(parts)))


def concentrate(refined: Sequence[Tensor], out_h: int, out_w: int, conv: Conv2d) -> Tensor:
    _check(len(refined) > 0, "nothing to concentrate")
    return relu(conv(concat([bilinear_resize(r, out_h, out_w) for r in refined])))


class FemState:
    """All learnable parts of one FEM instance."""

    def __init__(self, c: int, scales: ScaleSet, use_prior: bool, rng: np.random.Generator):
        self.c = c
        self.scales = scales
        self.use_prior = use_prior
        self.steps = schedule_path(scales)
        in_ch = 2 * c + (1 if use_prior else 0)
        self.enrich = [Conv2d(in_ch, c, 1, rng) for _ in scales.sizes]
        self.units = [MergeUnit(c, step.aux is not None, rng) for step in self.steps]
        self.concentrate = Conv2d(scales.n * c, c, 1, rng)
        self.heads = [ClassificationHead(c, rng) for _ in scales.sizes]

    def parameters(self) -> list[Parameter]:
        ps = [p for conv in self.enrich for p in conv.parameters()]
        ps += [p for u in self.units for p in u.parameters()]
        ps += self.concentrate.parameters()
        ps += [p for hd in self.heads for p in hd.parameters()]
        return ps

    def __call__(self, xq: Tensor, xs_vec: Tensor, prior: Tensor | None) -> tuple[Tensor, list[Tensor]]:
        _check((prior is not None) == self.use_prior, "prior presence does not match FEM config")
        h, w = xq.shape[2:]
        projected = project_sources(xq, xs_vec, prior, self.scales)
        merged = [enrich_scale(q, s, y, conv) for (q, s, y), conv in zip(projected, self.enrich)]
        current = merged
        refined: list[Tensor | None] = [None] * self.scales.n
        stage = 0
        for step, unit in zip(self.steps, self.units):
            if step.stage != stage:
                current, refined, stage = refined, [None] * self.scales.n, step.stage
            aux = current[step.aux] if step.aux is not None else None
            refined[step.main] = unit(current[step.main], aux)
        return concentrate(refined, h, w, self.concentrate), refined


def intermediate_logits(refined: Sequence[Tensor], heads: Sequence[ClassificationHead],
                        out_h: int, out_w: int) -> list[Tensor]:
    _check(len(refined) == len(heads), f"{len(heads)} heads for {len(refined)} scales")
    return [bilinear_resize(hd(r), out_h, out_w) for r, hd in zip(refined, heads)]
