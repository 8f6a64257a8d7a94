"""Batch command-line front end.

Subcommands mirror the two-phase workflow: `preprocess` cleans a corpus,
`pretrain` runs masked-reconstruction pretraining, `finetune` attaches and
trains a classification head, `eval` writes metrics and curves, and
`reconstruct` renders an original/masked/reconstructed triptych.

Every run is reproducible from (inputs, config, seed): all randomness
derives from --seed, and the resolved configuration is echoed to
<out>/config.resolved.json.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import corpus, imgproc, metrics
from . import model as M
from . import train as TR
from .config import ConfigError, RunConfig, load_config
from .rng import Rng


def _resolved_json(obj) -> object:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _resolved_json(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: _resolved_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_resolved_json(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _prepare_out(args, cfg: RunConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {
        "command": args.command,
        "seed": args.seed,
        "threads": args.threads,
        "config": _resolved_json(cfg),
    }
    resolved["config"].pop("raw", None)
    (out / "config.resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True), encoding="utf-8")
    return out


def _load_images(records, expect_size: int | None = None):
    images = []
    for r in records:
        img = imgproc.read_png(r.path)
        if expect_size is not None and img.shape[:2] != (expect_size, expect_size):
            img = imgproc.resize_bilinear(img, expect_size, expect_size)
        images.append(img)
    return images


def _label_vocabulary(records) -> list[str]:
    labels = sorted({r.label for r in records if r.label is not None})
    missing = [r.path for r in records if r.label is None]
    if missing:
        raise corpus.ManifestError(f"records without labels: {missing[:3]}")
    return labels


def cmd_preprocess(args, cfg: RunConfig) -> int:
    out = _prepare_out(args, cfg)
    manifest = corpus.load_manifest(args.manifest)
    pre = cfg.preprocess
    if args.debug_masks:
        pre = dataclasses.replace(pre, debug_masks=True)
    report = corpus.run_preprocess_batch(manifest, pre, out, workers=args.threads)
    print(f"processed {report.processed}, failed {report.failed} -> {out}/report.json")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = _prepare_out(args, cfg)
    manifest = corpus.load_manifest(args.manifest)
    records = manifest.subset(split="train") or manifest.records
    images = _load_images(records, cfg.model.image_size)
    net = M.MaePretrainModel(cfg.model, Rng(args.seed).child(0))
    sec = cfg.pretrain
    log, ckpt = TR.pretrain(
        net,
        images,
        epochs=sec.epochs,
        seed=args.seed,
        batch_size=sec.batch_size,
        base_lr=sec.base_lr,
        optimizer=sec.optimizer,
        augment_cfg=sec.augment,
        norm=sec.normalization,
        checkpoint_dir=None,
        include_optimizer=sec.include_optimizer_state,
    )
    TR.save_checkpoint(out / "pretrained.usfm", ckpt)
    TR.write_log_csv(log, out / "pretrain_log.csv")
    print(f"pretrained {len(images)} images for {len(log)} steps; final loss {log[-1].loss:.4f}")
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    out = _prepare_out(args, cfg)
    manifest = corpus.load_manifest(args.manifest)
    ckpt = TR.load_checkpoint(args.checkpoint)
    records = manifest.subset(split="train")
    if not records:
        raise corpus.ManifestError("no train-split records in manifest")
    classes = _label_vocabulary(records)
    labels = np.array([classes.index(r.label) for r in records], dtype=np.int64)
    images = _load_images(records, cfg.model.image_size)
    sec = cfg.finetune

    if args.grid_search:
        folds = [r.fold for r in records]
        if any(f is None for f in folds):
            raise metrics.MissingFoldIds("grid search needs fold ids on every train record")
        grid = TR.grid_search_finetune(
            ckpt, images, labels, np.array(folds), n_classes=len(classes),
            epochs=sec.grid_epochs, seed=args.seed,
            learning_rates=sec.grid_learning_rates, weight_decays=sec.grid_weight_decays,
            batch_size=sec.batch_size, max_steps=sec.max_steps,
        )
        (out / "grid.json").write_text(json.dumps(grid, indent=2), encoding="utf-8")
        base_lr = grid["best"]["lr"]
        optimizer = dataclasses.replace(sec.optimizer, weight_decay=grid["best"]["weight_decay"])
        print(f"grid best: lr={base_lr} wd={optimizer.weight_decay}")
    else:
        base_lr = sec.base_lr
        optimizer = sec.optimizer

    clf, log, fckpt = TR.finetune(
        ckpt, images, labels, n_classes=len(classes), epochs=sec.epochs, seed=args.seed,
        batch_size=sec.batch_size, base_lr=base_lr, optimizer=optimizer,
        augment_cfg=sec.augment, norm=sec.normalization,
        freeze_encoder=sec.freeze_encoder, pooling=sec.pooling, max_steps=sec.max_steps,
    )
    fckpt.metadata["classes"] = classes
    TR.save_checkpoint(out / "finetuned.usfm", fckpt)
    TR.write_log_csv(log, out / "finetune_log.csv")
    print(f"fine-tuned on {len(images)} images, {len(log)} steps; final loss {log[-1].loss:.4f}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _prepare_out(args, cfg)
    manifest = corpus.load_manifest(args.manifest)
    ckpt = TR.load_checkpoint(args.checkpoint)
    clf = TR.classifier_from_checkpoint(ckpt)
    sec = cfg.eval
    records = manifest.subset(split=sec.split)
    if not records:
        raise corpus.ManifestError(f"no {sec.split}-split records in manifest")
    classes = ckpt.metadata.get("classes") or _label_vocabulary(records)
    labels = np.array([classes.index(r.label) for r in records], dtype=np.int64)
    images = _load_images(records, clf.cfg.image_size)
    probs = TR.classifier_predict(clf, images, norm=sec.normalization, batch_size=sec.batch_size)
    preds = probs.argmax(axis=1)

    report = metrics.metrics_report(preds, labels, len(classes))
    (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    curves = []
    for kind in ("roc", "pr"):
        for curve in metrics.one_vs_rest_curves(probs, labels, kind=kind):
            metrics.write_curve_csv(curve, out / f"{kind}_class{curve.class_id}.csv")
            curves.append(curve)
        if args.svg or sec.svg:
            svg = metrics.curve_svg([c for c in curves if c.kind == kind], title=kind.upper())
            (out / f"{kind}.svg").write_text(svg, encoding="utf-8")
    print(f"macro F1 {report.macro['f1']:.4f}, micro F1 {report.micro['f1']:.4f} on {len(records)} samples")
    return 0


def cmd_reconstruct(args, cfg: RunConfig) -> int:
    out = _prepare_out(args, cfg)
    ckpt = TR.load_checkpoint(args.checkpoint)
    net = TR.pretrain_model_from_checkpoint(ckpt)
    mcfg = net.cfg
    raw = imgproc.read_png(args.image)
    raw = imgproc.resize_bilinear(imgproc.promote_rgb(raw), mcfg.image_size, mcfg.image_size)
    norm = cfg.pretrain.normalization
    x = imgproc.normalize(raw, norm)

    ratio = mcfg.mask_ratio if args.mask_ratio is None else args.mask_ratio
    plan = M.sample_mask(mcfg.n_patches, ratio, Rng(args.seed))
    grid = M.patchify(x, mcfg.patch_size)
    encoded = M.encode(net, grid, plan)
    x_hat = M.decode(net, encoded, plan).data

    recon = grid.patches.copy()
    recon[plan.masked] = x_hat[plan.masked]
    masked_view = grid.patches.copy()
    masked_view[plan.masked] = imgproc.normalize(np.full_like(raw, 0.5), norm).reshape(3, -1).mean()
    panels = []
    for patches in (grid.patches, masked_view, recon):
        g = M.PatchGrid(patches, grid.image_h, grid.image_w, grid.patch_size, grid.channels)
        panels.append(imgproc.denormalize(M.unpatchify(g), norm))
    strip = np.concatenate(panels, axis=1)
    imgproc.write_png(out / "reconstruction.png", strip)
    print(f"wrote {out}/reconstruction.png (masked {plan.m}/{mcfg.n_patches} patches)")
    return 0


def _config_epilog() -> str:
    """Enumerate every accepted config key per section, from the schema."""
    from .annomask import CleanConfig, InpaintConfig
    from .config import EvalSection, FinetuneSection, PretrainSection
    from .corpus import PreprocessConfig
    from .imgproc import NormalizationSpec
    from .model import ModelConfig
    from .train import AugmentConfig, OptimizerConfig

    sections = {
        "preprocess": (PreprocessConfig, {"clean": (CleanConfig, {"inpaint": (InpaintConfig, {})})}),
        "model": (ModelConfig, {}),
        "pretrain": (PretrainSection, {"optimizer": (OptimizerConfig, {}), "augment": (AugmentConfig, {}),
                                       "normalization": (NormalizationSpec, {})}),
        "finetune": (FinetuneSection, {"optimizer": (OptimizerConfig, {}), "augment": (AugmentConfig, {}),
                                       "normalization": (NormalizationSpec, {})}),
        "eval": (EvalSection, {"normalization": (NormalizationSpec, {})}),
    }

    def keys_of(cls, nested, indent="    "):
        lines = []
        for f in dataclasses.fields(cls):
            if f.name in nested:
                sub_cls, sub_nested = nested[f.name]
                lines.append(f"{indent}{f.name}:")
                lines.extend(keys_of(sub_cls, sub_nested, indent + "    "))
            else:
                lines.append(f"{indent}{f.name}")
        return lines

    out = ["config file keys (JSON; unknown keys are rejected):"]
    for name, (cls, nested) in sections.items():
        out.append(f"  {name}:")
        if name == "model":
            out.append("      preset  (tiny)")
        out.extend(keys_of(cls, nested, "      "))
    return "\n".join(out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sonomae",
        description=__doc__,
        epilog=_config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--config", help="JSON run configuration (unknown keys are rejected)")
    parser.add_argument("--seed", type=int, default=0, help="master seed; every random draw derives from it")
    parser.add_argument("--out", default="run", help="output directory for all artifacts")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for batch preprocessing")
    parser.add_argument("--debug-masks", action="store_true", help="dump every intermediate mask as PNG")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="clean + resize every manifest record to PNG")
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning from a pretraining checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid-search", action="store_true",
                   help="cross-validated lr x weight-decay selection over manifest folds first")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="metrics JSON + ROC/PR curve CSVs (and optional SVG)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--svg", action="store_true", help="also render curves as SVG")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("reconstruct", help="original/masked/reconstructed triptych PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask-ratio", type=float, default=None)
    p.set_defaults(fn=cmd_reconstruct)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.fn(args, cfg)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - structured error reporting is the contract
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
