"""Command-line entry point: ``spinalis <command> [options]``.

Exit status is 0 on success, 1 for invalid input or usage, 2 when a command
fails while running.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline
from .augment import AugmentConfig, augment_dataset
from .cnn import CnnModel, cnn_forward, resample_roi
from .core import Label, MaskVolume, SvolFormatError, load_volume
from .forest import ForestModel
from .localize import fuse_tumor_with_labels, label_vertebrae, write_overlay
from .metrics import metric_report
from .phantom import TumorType
from .segment import _model_config, segment_volume, train_segmenter


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("SPINALIS_THREADS")
    if env is None:
        return 1
    try:
        return int(env)
    except ValueError:
        raise ValueError(f"SPINALIS_THREADS must be an integer, got {env!r}") from None


def _config(args) -> pipeline.PipelineConfig:
    raw = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        if not isinstance(raw, dict):
            raise ValueError("configuration file must hold a JSON object")
    return pipeline.PipelineConfig.from_dict(raw, seed=args.seed, threads=_threads(args))


# ---------------------------------------------------------------- commands

def cmd_phantom_gen(args, cfg):
    phantom = cfg.phantom
    for name in ("width", "height", "depth"):
        if getattr(args, name) is not None:
            phantom = replace(phantom, **{name: getattr(args, name)})
    items = pipeline.generate_corpus(args.count, cfg.seed, phantom, args.control_every, args.tumor_type)
    path = pipeline.save_corpus(items, _out(args))
    print(f"wrote {len(items)} phantoms to {path.parent}")


def cmd_augment(args, cfg):
    items = [it for it in pipeline.load_corpus(args.corpus) if it.has_tumor]
    corpus = [(it.volume, it.anatomy) for it in items]
    samples, manifest = augment_dataset(corpus, AugmentConfig(), cfg.seed, _out(args),
                                        [it.source_id for it in items], [it.spec.tumor_type for it in items])
    print(f"wrote {len(samples)} augmented slices")


def cmd_train_seg(args, cfg):
    items = pipeline.load_corpus(args.corpus)
    train_ids, test_ids = pipeline.split_corpus([it.source_id for it in items], cfg.split_ratio, cfg.seed)
    keep = set(train_ids)
    corpus = [(it.volume, it.truth) for it in items if it.source_id in keep and it.has_tumor]
    model = train_segmenter(corpus, cfg.segmenter)
    out = _out(args)
    model.save(out / "segmenter.json")
    _write_json(out / "split.json", {"train": train_ids, "test": test_ids, "ratio": cfg.split_ratio, "seed": cfg.seed})
    print(f"trained on {len(corpus)} volumes; model at {out / 'segmenter.json'}")


def cmd_train_cls(args, cfg):
    out = _out(args)
    train_cfg = cfg.train if args.epochs is None else replace(cfg.train, epochs=args.epochs)
    if args.corpus:
        items = [it for it in pipeline.load_corpus(args.corpus) if it.has_tumor]
        x = np.stack([resample_roi(pipeline.tumor_crop(it.volume, it.truth)) for it in items]).astype(np.float32)
        y = np.array([int(it.spec.tumor_type) for it in items])
        half = max(1, len(x) // 5)
        train, test = (x[half:], y[half:]), (x[:half], y[:half])
    else:
        train = pipeline.classification_dataset(args.train_count, cfg.seed)
        test = pipeline.classification_dataset(args.test_count, cfg.seed + 1)
    model, report = pipeline.run_classification(train, test, train_cfg, cfg.seed)
    model.save(out / "classifier.cnn")
    _write_json(out / "classifier_report.json", report)
    print(f"test accuracy {report['test_accuracy']:.3f}")


def cmd_segment(args, cfg):
    model = ForestModel.load(args.model)
    vol = load_volume(args.volume)
    seg_cfg = None
    if args.threads is not None or os.environ.get("SPINALIS_THREADS"):
        seg_cfg = replace(_model_config(model, None), threads=cfg.threads)
    res = segment_volume(vol, model, seg_cfg)
    res.save(_out(args), Path(args.volume).stem)
    print(f"{int(np.count_nonzero(res.mask.data))} tumor voxels on {sum(res.relevant)} relevant slices")


def cmd_classify(args, cfg):
    model = CnnModel.load(args.model)
    vol = load_volume(args.volume)
    mask = load_volume(args.mask)
    roi = resample_roi(pipeline.tumor_crop(vol, mask), model.input_shape[1])
    probs = cnn_forward(model, roi)
    kind = TumorType(int(np.argmax(probs)))
    report = {"tumor_type": kind.display, "probabilities": {TumorType(i).display: float(p) for i, p in enumerate(probs)}}
    _write_json(_out(args) / "classification.json", report)
    print(kind.display)


def cmd_localize(args, cfg):
    tumor = load_volume(args.tumor)
    vert = load_volume(args.vertebrae)
    if not isinstance(tumor, MaskVolume) or not isinstance(vert, MaskVolume):
        raise ValueError("tumor and vertebra inputs must be u8 mask volumes")
    tumor = MaskVolume(np.where(tumor.data == Label.TUMOR, Label.TUMOR, 0).astype(np.uint8), tumor.spacing)
    labeling = label_vertebrae(vert)
    report = fuse_tumor_with_labels(tumor, labeling, args.adjacency_mm)
    out = _out(args)
    report.save(out / "localization.json")
    if args.overlay:
        backdrop = load_volume(args.overlay)
        write_overlay(backdrop, tumor, labeling, out / "overlay")
    print(json.dumps(report.to_dict()["impacted"]), report.to_dict()["origin"])


def cmd_eval(args, cfg):
    pred, truth = load_volume(args.pred), load_volume(args.truth)
    report = metric_report({Path(args.pred).stem: (pred.data, truth.data)})
    _write_json(_out(args) / "eval.json", report)
    print(json.dumps(report["aggregate"]["pixel"], sort_keys=True))


def cmd_ablation(args, cfg):
    items = pipeline.load_corpus(args.corpus)
    report = pipeline.run_ablation(items, cfg.segmenter, cfg.split_ratio, cfg.seed)
    _write_json(_out(args) / "ablation.json", report)
    print(f"dice FCM+RF {report['dice_fcm_rf']:.4f}  RF only {report['dice_rf_only']:.4f}")


def cmd_report(args, cfg):
    merged = {}
    for p in args.inputs:
        merged[Path(p).stem] = json.loads(Path(p).read_text())
    merged["config"] = cfg.to_dict()
    _write_json(_out(args) / "report.json", merged)
    print(f"merged {len(args.inputs)} reports")


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON pipeline configuration")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--out", default=".", help="output directory")

    parser = _Parser(prog="spinalis", description="Lumbar-spine tumor pipeline on synthetic phantoms")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    ph = sub.add_parser("phantom", help="phantom corpora")
    ph_sub = ph.add_subparsers(dest="phantom_command", parser_class=_Parser)
    gen = ph_sub.add_parser("gen", parents=[common], help="generate seeded phantoms")
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--control-every", type=int, default=0, help="make every Nth phantom tumor-free")
    gen.add_argument("--tumor-type", default=None)
    for name in ("width", "height", "depth"):
        gen.add_argument(f"--{name}", type=int, default=None)
    gen.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("augment", parents=[common], help="CSF glide and rotation doubling")
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train-seg", parents=[common], help="train the FCM+RF segmenter")
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("train-cls", parents=[common], help="train the tumor-type CNN")
    p.add_argument("--corpus", default=None, help="phantom corpus; generated crops when omitted")
    p.add_argument("--train-count", type=int, default=300)
    p.add_argument("--test-count", type=int, default=60)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train_cls)

    p = sub.add_parser("segment", parents=[common], help="segment one volume")
    p.add_argument("--model", required=True)
    p.add_argument("--volume", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("classify", parents=[common], help="classify a segmented tumor")
    p.add_argument("--model", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--mask", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("localize", parents=[common], help="fuse a tumor mask with vertebra labels")
    p.add_argument("--tumor", required=True)
    p.add_argument("--vertebrae", required=True)
    p.add_argument("--adjacency-mm", type=float, default=5.0)
    p.add_argument("--overlay", default=None, help="intensity volume for per-slice PGM overlays")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("eval", parents=[common], help="metrics for a predicted mask")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablation", parents=[common], help="segmentation with and without FCM features")
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("report", parents=[common], help="merge JSON reports")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            raise UsageError(parser.format_help())
        cfg = _config(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (ValueError, TypeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        args.func(args, cfg)
    except (ValueError, SvolFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime failure
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
