"""Tiny stride-4 convolutional feature extractor with mid- and high-level taps."""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .tensor import (
    ContractError,
    Conv2d,
    LrSchedule,
    Parameter,
    Tensor,
    _check,
    adaptive_avg_pool,
    bilinear_resize,
    concat,
    conv2d,
    poly_lr,
    relu,
    sgd_step,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)

STAGES = ("stem", "stage2", "stage3", "stage4")


def _run(conv: Conv2d, x: Tensor, track: bool) -> Tensor:
    if track:
        return relu(conv(x))
    w = Tensor(conv.weight.data)
    b = Tensor(conv.bias.data) if conv.bias else None
    return relu(conv2d(x, w, b, padding=conv.padding))


class Backbone:
    """Stem (two conv+relu, each followed by 2x2 average downsampling) and three
    resolution-preserving stages of two 3x3 conv+relu blocks each.

    ``widths`` gives the stem, stage2, stage3 and stage4 channel counts. Mid-level
    features concatenate stage2 and stage3 outputs; high-level features are the
    stage4 output.
    """

    def __init__(self, widths: Sequence[int] = (32, 48, 64, 64), seed: int = 0,
                 frozen: bool = True):
        _check(len(widths) == 4, "backbone needs four channel widths")
        self.widths = tuple(int(w) for w in widths)
        rng = np.random.default_rng(seed)
        w0, w2, w3, w4 = self.widths
        self.layers: dict[str, list[Conv2d]] = {
            "stem": [Conv2d(3, w0, 3, rng), Conv2d(w0, w0, 3, rng)],
            "stage2": [Conv2d(w0, w2, 3, rng), Conv2d(w2, w2, 3, rng)],
            "stage3": [Conv2d(w2, w3, 3, rng), Conv2d(w3, w3, 3, rng)],
            "stage4": [Conv2d(w3, w4, 3, rng), Conv2d(w4, w4, 3, rng)],
        }
        self.trainable: set[str] = set() if frozen else set(STAGES)

    @property
    def frozen(self) -> bool:
        return not self.trainable

    def freeze(self) -> None:
        self.trainable = set()

    def unfreeze(self, *stages: str) -> None:
        for s in stages or STAGES:
            _check(s in STAGES, f"unknown backbone stage {s!r}")
            self.trainable.add(s)

    @property
    def mid_channels(self) -> int:
        return self.widths[1] + self.widths[2]

    @property
    def high_channels(self) -> int:
        return self.widths[3]

    def parameters(self) -> list[Parameter]:
        return [p for s in STAGES for conv in self.layers[s] for p in conv.parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for s in STAGES if s in self.trainable
                for conv in self.layers[s] for p in conv.parameters()]

    def run_stage(self, name: str, x: Tensor) -> Tensor:
        track = name in self.trainable
        first, second = self.layers[name]
        if name == "stem":
            x = _run(first, x, track)
            x = adaptive_avg_pool(x, x.shape[2] // 2)
            x = _run(second, x, track)
            return adaptive_avg_pool(x, x.shape[2] // 2)
        return _run(second, _run(first, x, track), track)

    def stages(self, images) -> dict[str, Tensor]:
        x = images if isinstance(images, Tensor) else Tensor(images)
        _check(x.data.ndim == 4 and x.shape[1] == 3, f"expected [b,3,H,W] images, got {x.shape}")
        H, W = x.shape[2:]
        _check(H % 4 == 0 and W % 4 == 0, f"image size {H}x{W} not divisible by 4")
        _check(H == W, "square images only")
        out = {}
        for name in STAGES:
            x = self.run_stage(name, x)
            out[name] = x
        return out

    def extract(self, images) -> tuple[Tensor, Tensor]:
        """Return ``(mid, high)`` features at 1/4 of the input resolution."""
        s = self.stages(images)
        return concat([s["stage2"], s["stage3"]]), s["stage4"]

    def state(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()]

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        _check(len(arrays) == len(params), f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            _check(p.data.shape == a.shape, f"shape mismatch {p.data.shape} vs {a.shape}")
            p.tensor.data = np.array(a, dtype=np.float64)

    def checksum(self) -> str:
        """SHA-256 over every weight's raw bytes; equal iff the weights are bitwise equal."""
        h = hashlib.sha256()
        for a in self.state():
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()


def count_parameters(model) -> int:
    """Number of scalar learnable parameters (frozen weights excluded)."""
    if isinstance(model, Conv2d):
        params = model.parameters()
    elif hasattr(model, "trainable_parameters"):
        params = model.trainable_parameters()
    else:
        params = model.parameters()
    return int(sum(p.data.size for p in params))


# ---------------------------------------------------------------- pretraining

@dataclass
class PretrainResult:
    initial_loss: float
    final_loss: float
    pixel_accuracy: float
    majority_accuracy: float


def pretrain(backbone: Backbone, images: np.ndarray, label_maps: np.ndarray,
             test_classes: Sequence[int], epochs: int = 8, lr: float = 0.02,
             batch_size: int = 16, seed: int = 0, freeze: bool = True,
             holdout: float = 0.1) -> PretrainResult:
    """Train the backbone by per-pixel classification over base classes + background.

    ``label_maps`` holds per-pixel class ids (0 = background). The auxiliary
    1x1 classifier is discarded afterwards. Loss and accuracy are reported on a
    held-out slice of the samples.
    """
    label_maps = np.asarray(label_maps)
    present = set(int(c) for c in np.unique(label_maps)) - {0}
    leaked = sorted(present & set(int(c) for c in test_classes))
    if leaked:
        raise ContractError(f"pretraining set contains test-fold classes {leaked}")
    base = sorted(present)
    lookup = np.zeros(int(label_maps.max()) + 1, dtype=np.int64)
    for i, c in enumerate(base):
        lookup[c] = i + 1
    labels = lookup[label_maps]

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    n_hold = max(1, int(round(holdout * len(images))))
    hold, train = order[:n_hold], order[n_hold:]

    backbone.unfreeze()
    head = Conv2d(backbone.high_channels, len(base) + 1, 1, rng)
    params = backbone.trainable_parameters() + head.parameters()
    H, W = images.shape[2:]

    def logits_for(idx):
        _, high = backbone.extract(images[idx])
        return bilinear_resize(head(high), H, W)

    def evaluate():
        logits = logits_for(hold)
        loss = softmax_cross_entropy(logits, labels[hold]).data.item()
        pred = logits.data.argmax(axis=1)
        acc = float((pred == labels[hold]).mean())
        return loss, acc

    init_loss, _ = evaluate()
    steps_per_epoch = max(1, len(train) // batch_size)
    sched = LrSchedule(lr, epochs * steps_per_epoch)
    it = 0
    for epoch in range(epochs):
        perm = rng.permutation(train)
        for s in range(steps_per_epoch):
            idx = perm[s * batch_size:(s + 1) * batch_size]
            loss = softmax_cross_entropy(logits_for(idx), labels[idx])
            loss.backward()
            sgd_step(params, poly_lr(sched, it), momentum=0.9, weight_decay=1e-4)
            it += 1
        logger.debug("pretrain epoch %d loss %.4f", epoch, loss.data.item())
    final_loss, acc = evaluate()
    counts = np.bincount(labels[hold].ravel(), minlength=len(base) + 1)
    majority = float(counts.max() / counts.sum())
    if freeze:
        backbone.freeze()
    return PretrainResult(init_loss, final_loss, acc, majority)


# ---------------------------------------------------------------- weight files

MAGIC = b"PFBW"
VERSION = 1


def write_arrays(fh: BinaryIO, arrays: Sequence[np.ndarray]) -> None:
    """Layer count, then per layer: ndim, dims, raw float64 values (little-endian)."""
    fh.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def read_arrays(fh: BinaryIO) -> list[np.ndarray]:
    def take(n: int) -> bytes:
        buf = fh.read(n)
        if len(buf) != n:
            raise ContractError(f"weight file truncated at byte {fh.tell()}")
        return buf

    (count,) = struct.unpack("<I", take(4))
    out = []
    for _ in range(count):
        (ndim,) = struct.unpack("<I", take(4))
        _check(ndim <= 4, f"layer rank {ndim} exceeds 4")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        out.append(np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64))
    return out


def save_backbone(backbone: Backbone, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        write_arrays(fh, backbone.state())


def load_backbone(path: str | Path, frozen: bool = True) -> Backbone:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ContractError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        _check(version == VERSION, f"{path}: unsupported version {version}")
        arrays = read_arrays(fh)
    _check(len(arrays) == 16, f"{path}: expected 16 layers, found {len(arrays)}")
    bb = Backbone([arrays[i].shape[0] for i in (0, 4, 8, 12)], frozen=frozen)
    bb.load_state(arrays)
    return bb
