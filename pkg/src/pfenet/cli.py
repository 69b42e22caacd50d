"""Command-line front end: generate, pretrain, train, eval, prior, ablate.

Exit codes: 0 success, 2 configuration or contract error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfgmod
from . import plotting
from .backbone import Backbone, load_backbone, save_backbone
from .codec import prior_to_gray, write_pgm, write_ppm
from .episodes import SynthDataset, episode_stream, generate, load_dataset, save_dataset, to_input
from .experiment import (
    GRID_FIELDS,
    expand_arms,
    evaluate,
    pretrain_backbone,
    run_arm,
    summarize,
    train_model,
)
from .metrics import fb_iou, fmt, miou, write_report
from .model import FeatureCache, NonFiniteLoss, PFENet, load_checkpoint, save_checkpoint, variant_config
from .prior import downsample_mask, prior_from_features
from .tensor import ContractError, Tensor, relu, resize_array

logger = logging.getLogger("pfenet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


# ---------------------------------------------------------------- helpers

def _out_dir(cfg: cfgmod.RunConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg: cfgmod.RunConfig) -> SynthDataset:
    root = Path(cfg.dataset.path)
    if not (root / "manifest.json").exists():
        raise ContractError(f"dataset.path: no dataset at {root} (run `generate` first)")
    ds = load_dataset(root)
    if ds.config.n_classes != cfg.dataset.n_classes or ds.config.size != cfg.dataset.size:
        raise ContractError(f"dataset.path: {root} holds {ds.config.n_classes} classes of size "
                            f"{ds.config.size}, config expects {cfg.dataset.n_classes} / {cfg.dataset.size}")
    return ds


def _backbone(cfg: cfgmod.RunConfig, ds: SynthDataset, out: Path) -> Backbone:
    """Load the configured weight file, or pretrain on the fold's base classes and save it."""
    weights = cfg.pretrain.weights
    if weights:
        if not Path(weights).exists():
            raise ContractError(f"pretrain.weights: {weights} does not exist")
        bb = load_backbone(weights)
        if list(bb.widths) != list(cfg.pretrain.widths):
            raise ContractError(f"pretrain.weights: widths {list(bb.widths)} differ from pretrain.widths")
        return bb
    bb, res = pretrain_backbone(ds, cfg.fold_split(), cfg.pretrain_config(), seed=cfg.seed)
    save_backbone(bb, out / "backbone.bin")
    _write_rows(out / "pretrain.csv", ["initial_loss", "final_loss", "pixel_accuracy", "majority_accuracy"],
                [{"initial_loss": res.initial_loss, "final_loss": res.final_loss,
                  "pixel_accuracy": res.pixel_accuracy, "majority_accuracy": res.majority_accuracy}])
    return bb


def _write_rows(path: Path, fields: Sequence[str], rows: Sequence[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: fmt(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- commands

def cmd_generate(cfg: cfgmod.RunConfig) -> int:
    ds = generate(cfg.dataset_config())
    root = save_dataset(ds, cfg.dataset.path)
    print(f"wrote {len(ds)} samples to {root} (manifest sha256 {_sha256(root / 'manifest.json')[:16]})")
    return EXIT_OK


def cmd_pretrain(cfg: cfgmod.RunConfig) -> int:
    ds = _dataset(cfg)
    out = _out_dir(cfg)
    bb, res = pretrain_backbone(ds, cfg.fold_split(), cfg.pretrain_config(), seed=cfg.seed)
    save_backbone(bb, out / "backbone.bin")
    _write_rows(out / "pretrain.csv", ["initial_loss", "final_loss", "pixel_accuracy", "majority_accuracy"],
                [{"initial_loss": res.initial_loss, "final_loss": res.final_loss,
                  "pixel_accuracy": res.pixel_accuracy, "majority_accuracy": res.majority_accuracy}])
    print(f"pixel accuracy {res.pixel_accuracy:.4f} (majority {res.majority_accuracy:.4f}); "
          f"wrote {out / 'backbone.bin'}")
    return EXIT_OK


def cmd_train(cfg: cfgmod.RunConfig) -> int:
    ds = _dataset(cfg)
    out = _out_dir(cfg)
    fold = cfg.fold_split()
    bb = _backbone(cfg, ds, out)
    model_cfg = variant_config(cfg.model_config(), cfg.model.variant, cfg.dataset.size // 4)
    model = PFENet(bb, model_cfg)
    cache = FeatureCache(bb, ds.images) if model_cfg.freeze_backbone else None
    log = train_model(model, ds, fold, cfg.optim_config(), k=1, seed=cfg.seed, cache=cache)
    leaked = sorted(log.classes_seen & set(fold.test_classes))
    if leaked:
        raise ContractError(f"training touched test-fold classes {leaked}")
    meta = {"fold": {"index": fold.fold, "scheme": fold.scheme}, "variant": cfg.model.variant,
            "dataset": {"n_classes": cfg.dataset.n_classes, "size": cfg.dataset.size},
            "seed": cfg.seed}
    save_checkpoint(model, out / "checkpoint.pfck", meta)
    _write_rows(out / "train_log.csv", ["step", "lr", "loss"],
                [{"step": i, "lr": lr, "loss": loss} for i, (lr, loss) in enumerate(zip(log.lrs, log.losses))])
    plotting.loss_curve(log.losses, log.lrs, out / "train_loss.png")
    print(f"trained {cfg.model.variant} for {len(log.losses)} steps; final loss {log.losses[-1]:.4f}")
    return EXIT_OK


def _load_for_eval(cfg: cfgmod.RunConfig, checkpoint: str) -> tuple[PFENet, dict]:
    if not Path(checkpoint).exists():
        raise ContractError(f"checkpoint {checkpoint} does not exist")
    model, meta = load_checkpoint(checkpoint)
    fold_meta = meta.get("fold", {})
    if fold_meta and (fold_meta.get("index") != cfg.fold.index or fold_meta.get("scheme") != cfg.fold.scheme):
        raise ContractError(f"fold: checkpoint was trained for fold {fold_meta.get('index')} "
                            f"({fold_meta.get('scheme')}), config asks for fold {cfg.fold.index} "
                            f"({cfg.fold.scheme})")
    return model, meta


def cmd_eval(cfg: cfgmod.RunConfig, checkpoint: str) -> int:
    model, _ = _load_for_eval(cfg, checkpoint)
    ds = _dataset(cfg)
    out = _out_dir(cfg)
    fold = cfg.fold_split()
    cache = FeatureCache(model.backbone, ds.images)
    rows = []
    for run in range(cfg.eval.repeat):
        seed = cfg.eval.seed + run
        acc = evaluate(model, ds, fold, cfg.eval.shot, cfg.eval.episodes, seed, cache)
        rows.append({"fold": fold.fold, "shot": cfg.eval.shot, "run": run, "seed": seed,
                     "episodes": cfg.eval.episodes, "miou": miou(acc, fold.test_classes),
                     "fb_iou": fb_iou(acc)})
    extra: list[str] = []
    if cfg.eval.repeat > 1:
        extra = ["miou_mean", "miou_std", "fb_iou_mean", "fb_iou_std"]
        for name in ("miou", "fb_iou"):
            vals = np.array([r[name] for r in rows])
            for r in rows:
                r[f"{name}_mean"] = float(vals.mean())
                r[f"{name}_std"] = float(vals.std(ddof=1))
    write_report(out / "metrics.csv", rows, extra)
    plotting.run_scores(rows, out / "metrics.png")
    for r in rows:
        print(f"run {r['run']}: mIoU {r['miou']:.4f}  FB-IoU {r['fb_iou']:.4f}")
    return EXIT_OK


def cmd_prior(cfg: cfgmod.RunConfig, checkpoint: str | None, episode: int) -> int:
    ds = _dataset(cfg)
    out = _out_dir(cfg)
    fold = cfg.fold_split()
    if checkpoint:
        model, _ = _load_for_eval(cfg, checkpoint)
        bb, prior_cfg = model.backbone, model.config.prior
        reducers = (model.down_query, model.down_supp)
    else:
        bb = load_backbone(cfg.pretrain.weights) if cfg.pretrain.weights else _backbone(cfg, ds, out)
        prior_cfg, reducers = cfg.model_config().prior, None
    ep = next(episode_stream(ds, fold, "test", 1, cfg.eval.seed, 1, start=episode))
    qmid, qhigh = bb.extract(to_input(ep.query_image[None]))
    smid, shigh = bb.extract(to_input(ep.support_images[:1]))
    if prior_cfg.level == "high":
        xq, xs = qhigh, shigh
    elif prior_cfg.feature_source == "learnable-mid" and reducers is not None:
        xq, xs = relu(reducers[0](qmid)), relu(reducers[1](smid))
    else:
        xq, xs = qmid, smid
    h, w = xq.shape[2:]
    soft = downsample_mask(ep.support_masks[:1, None], h, w)
    y = prior_from_features(Tensor(xq.data), Tensor(xs.data), soft, prior_cfg).data[0, 0]
    H, W = ep.query_mask.shape
    write_ppm(out / "query.ppm", ep.query_image)
    write_ppm(out / "support.ppm", ep.support_images[0])
    write_pgm(out / "prior.pgm", prior_to_gray(y))
    write_pgm(out / "prior_full.pgm", prior_to_gray(resize_array(y[None], H, W)[0]))
    plotting.prior_panel(ep.query_image, ep.support_images[0], ep.support_masks[0],
                         np.clip(resize_array(y[None], H, W)[0], 0, 1), out / "prior.png", ep.query_mask)
    print(f"episode {episode}: class {ep.cls}, query {ep.query_index}, support {ep.support_indices[0]}; "
          f"wrote {out / 'prior.pgm'}")
    return EXIT_OK


def cmd_ablate(cfg: cfgmod.RunConfig, variants: Sequence[str], paths: Sequence[str],
               scale_sets: Sequence[Sequence[int]], seeds: Sequence[int], folds: Sequence[int],
               shots: Sequence[int]) -> int:
    ds = _dataset(cfg)
    out = _out_dir(cfg)
    arms = expand_arms(variants, paths, scale_sets)
    rows: list[dict] = []
    for f in folds:
        fcfg = cfgmod.apply_overrides(cfg, {"fold.index": f})
        fold = fcfg.fold_split()
        bb, _ = pretrain_backbone(ds, fold, fcfg.pretrain_config(), seed=cfg.seed)
        cache = FeatureCache(bb, ds.images)
        for arm in arms:
            for seed in seeds:
                _, _, arm_rows = run_arm(bb, cache, ds, fold, fcfg.model_config(), arm,
                                         fcfg.optim_config(), seed, shots, cfg.eval.episodes, cfg.eval.seed)
                rows.extend(arm_rows)
                for r in arm_rows:
                    print(f"fold {f} {r['arm']:<20} seed {seed} {r['shot']}-shot mIoU {r['miou']:.4f}")
    _write_rows(out / "ablation.csv", GRID_FIELDS, rows)
    summary = summarize(rows)
    _write_rows(out / "ablation_summary.csv", ["arm", "shot", "runs", "miou_mean", "miou_std"], summary)
    plotting.arm_bars([f"{s['arm']} ({s['shot']}-shot)" for s in summary],
                      [s["miou_mean"] for s in summary], [s["miou_std"] for s in summary],
                      out / "ablation.png")
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing

def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _scale_sets(text: str) -> list[list[int]]:
    return [_int_list(part.replace("-", ",")) for part in text.split(";") if part]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pfenet", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory (overrides `output`)")
    common.add_argument("--dataset", help="dataset directory (overrides `dataset.path`)")
    common.add_argument("--seed", type=int)
    common.add_argument("--fold", type=int, help="fold index 0..3")
    common.add_argument("--scheme", choices=("contiguous", "strided"))
    common.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                        help="override any config field, e.g. --set model.channels=16")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="render the synthetic dataset")
    sub.add_parser("pretrain", parents=[common], help="pretrain a backbone on base classes")
    t = sub.add_parser("train", parents=[common], help="episodic training; writes checkpoint and loss CSV")
    t.add_argument("--variant", choices=("baseline", "prior", "fem", "full"))
    t.add_argument("--max-iter", type=int)
    t.add_argument("--weights", help="pretrained backbone weight file")
    e = sub.add_parser("eval", parents=[common], help="K-shot evaluation on the test fold")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--shot", type=int)
    e.add_argument("--episodes", type=int)
    e.add_argument("--repeat", type=int)
    pr = sub.add_parser("prior", parents=[common], help="write prior-mask images for one test episode")
    pr.add_argument("--checkpoint")
    pr.add_argument("--weights", help="pretrained backbone weight file")
    pr.add_argument("--episode", type=int, default=0)
    a = sub.add_parser("ablate", parents=[common], help="variant x path x scale-set grid")
    a.add_argument("--variants", default="baseline,prior,fem,full")
    a.add_argument("--paths", default="TD")
    a.add_argument("--scale-sets", default="8-4-2", help="semicolon-separated, e.g. '8-4-2;8-4'")
    a.add_argument("--seeds", type=_int_list, default=[0])
    a.add_argument("--folds", type=_int_list, default=[0, 1, 2, 3])
    a.add_argument("--shots", type=_int_list, default=[1])
    a.add_argument("--episodes", type=int)
    return p


def _parse_set(items: Sequence[str]) -> dict:
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise cfgmod.ConfigError(f"--set {item!r}: expected KEY=VALUE")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def resolve_config(args: argparse.Namespace) -> cfgmod.RunConfig:
    """Defaults, then the config file, then command-line flags."""
    cfg = cfgmod.load(args.config)
    flags = {
        "output": args.out, "dataset.path": args.dataset, "seed": args.seed,
        "fold.index": args.fold, "fold.scheme": args.scheme,
        "model.variant": getattr(args, "variant", None), "optim.max_iter": getattr(args, "max_iter", None),
        "pretrain.weights": getattr(args, "weights", None), "eval.shot": getattr(args, "shot", None),
        "eval.episodes": getattr(args, "episodes", None), "eval.repeat": getattr(args, "repeat", None),
    }
    overrides = {k: v for k, v in flags.items() if v is not None}
    overrides.update(_parse_set(args.set))
    return cfgmod.apply_overrides(cfg, overrides).validate()


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "prior":
            return cmd_prior(cfg, args.checkpoint, args.episode)
        return cmd_ablate(cfg, args.variants.split(","), args.paths.split(","), _scale_sets(args.scale_sets),
                          args.seeds, args.folds, args.shots)
    except NonFiniteLoss as exc:
        print(f"error: {exc} (step {exc.step})", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
