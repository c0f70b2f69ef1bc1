"""Command-line entry point: phantom generation, class weights, training,
evaluation, single-image segmentation and report emission."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .balance import class_frequencies, median_frequency_weights
from .data import (
    LABEL_PALETTE,
    SPLITS,
    Sample,
    check_no_leakage,
    load_sample,
    read_manifest,
    save_image_png,
    save_label_png,
    split_by_patient,
    write_manifest,
    _read_png,
)
from .errors import ConfigurationError, DataError, DomainError, SegError
from .metrics import per_image_scores
from .model import CLASS_NAMES, SegmentationModel, desk_model_config
from .phantom import PhantomSpec, generate_phantoms
from .report import write_json, write_report
from .trainer import TrainConfig, load_checkpoint, predict, train, write_history_csv

log = logging.getLogger("infarctseg")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

MODELS = {
    "mi-resnet18-ac": "resnet18",
    "mi-resnet50-ac": "resnet50",
    "mi-mobilenet-ac": "mobilenetv2",
}
DISPLAY_NAMES = {
    "mi-resnet18-ac": "MI-ResNet18-AC",
    "mi-resnet50-ac": "MI-ResNet50-AC",
    "mi-mobilenet-ac": "MI-MobileNet-AC",
}


class UsageError(SegError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_config(out: Path, args, **extra) -> None:
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    write_json(out / "config.json", {"command": args.command, "flags": flags, **extra})


def _resolve(manifest: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else manifest.parent / q


def _load_split(manifest: Path, split: str, seed: int, size: int | None) -> tuple[list[Sample], list[str]]:
    records = read_manifest(manifest)
    if records and "split" not in records[0]:
        records = split_by_patient(records, seed=seed)
    check_no_leakage(records)
    samples, names = [], []
    for r in records:
        if r["split"] != split:
            continue
        img_path, lab_path = _resolve(manifest, r["image"]), _resolve(manifest, r["label"])
        n = size if size else _read_png(img_path, "image").shape[0]
        img, lab = load_sample(img_path, lab_path, n)
        samples.append(Sample(img, lab, r["patient"]))
        names.append(r["image"])
    if not samples:
        raise DataError(f"manifest {manifest} has no {split} records")
    return samples, names


def _model_kind(name: str) -> str:
    if name not in MODELS:
        raise UsageError(f"unknown model {name!r}; valid names: {', '.join(MODELS)}")
    return MODELS[name]


def _weights_payload(freq) -> dict:
    w = median_frequency_weights(freq)
    return {
        "classes": list(CLASS_NAMES),
        "frequencies": [float(v) for v in np.asarray(getattr(freq, "frequencies", freq))],
        "weights": [float(v) for v in w],
    }


def _tap(value: str | None):
    if value is None or value == "auto":
        return None
    return int(value) if value.isdigit() else value


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(args) -> None:
    out = _out_dir(args)
    spec = PhantomSpec(size=args.size, seed=args.seed, scar_prob=args.scar_prob,
                       slices_per_patient=args.slices_per_patient)
    samples = generate_phantoms(spec, args.count)
    (out / "images").mkdir(exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        img, lab = f"images/{i:05d}.png", f"labels/{i:05d}.png"
        save_image_png(out / img, s.image)
        save_label_png(out / lab, s.labels)
        records.append({"image": img, "label": lab, "patient": s.patient})
    records = split_by_patient(records, seed=args.seed)
    write_manifest(out / "manifest.json", records)
    _write_config(out, args, phantom=asdict(spec))
    print(f"wrote {len(records)} samples to {out}")


def cmd_weights(args) -> None:
    out = _out_dir(args)
    if args.frequencies is not None:
        if len(args.frequencies) != len(CLASS_NAMES):
            raise UsageError(f"--frequencies needs {len(CLASS_NAMES)} values (background, blood, muscle, scar)")
        freq = np.asarray(args.frequencies, dtype=np.float64)
        freq = freq / freq.sum()
    elif args.data is not None:
        samples, _ = _load_split(Path(args.data), "train", args.seed, args.size)
        freq = class_frequencies([s.labels for s in samples])
    else:
        raise UsageError("weights needs --data or --frequencies")
    payload = _weights_payload(freq)
    write_json(out / "weights.json", payload)
    _write_config(out, args)
    print(" ".join(f"{n}={w:.4f}" for n, w in zip(CLASS_NAMES, payload["weights"])))


def cmd_train(args) -> None:
    kind = _model_kind(args.model)
    out = _out_dir(args)
    manifest = Path(args.data)
    train_set, _ = _load_split(manifest, "train", args.seed, args.size)
    val_set, _ = _load_split(manifest, "val", args.seed, args.size)
    freq = class_frequencies([s.labels for s in train_set])
    weights_payload = _weights_payload(freq)
    weights = np.asarray(weights_payload["weights"])
    model_cfg = desk_model_config(kind, seed=args.seed, width=args.width,
                                  reduced_depth=not args.full_depth, low_level_tap=_tap(args.tap))
    cfg = TrainConfig(initial_lr=args.lr, max_epochs=args.max_epochs, batch_size=args.batch_size,
                      patience=args.patience, seed=args.seed, augment=not args.no_augment)
    write_json(out / "weights.json", weights_payload)
    _write_config(out, args, model_config=model_cfg.to_dict(), train_config=asdict(cfg))
    model = SegmentationModel(model_cfg)
    result = train(model, train_set, val_set, weights, cfg, checkpoint_path=out / "checkpoint.bin")
    write_history_csv(out / "history.csv", result.history)
    print(f"best epoch {result.best_epoch} val loss {result.best_val_loss:.6f}")


def cmd_eval(args) -> None:
    out = _out_dir(args)
    ckpt = Path(args.checkpoint)
    cfg_path = Path(args.config) if args.config else ckpt.parent / "config.json"
    run_cfg = {}
    if cfg_path.exists():
        try:
            run_cfg = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"cannot parse {cfg_path}: {exc}") from exc
    expected = run_cfg.get("model_config")
    model, _, _ = load_checkpoint(ckpt, expected_config=expected)
    samples, names = _load_split(Path(args.data), args.split, args.seed, args.size)
    preds = predict(model, [s.image for s in samples])
    tol = args.tolerance if args.tolerance == "auto" else float(args.tolerance)
    report = per_image_scores(preds, [s.labels for s in samples], tol)
    flag = run_cfg.get("flags", {}).get("model")
    name = args.name or DISPLAY_NAMES.get(flag, flag or "model")
    write_report(out, name, report, names)
    _write_config(out, args, model_config=model.cfg.to_dict())
    print(f"gAcc {report.g_acc:.4f} aAcc {report.a_acc:.4f} wIoU {report.w_iou:.4f} bfscore {report.bfscore:.4f}")


def overlay(image: np.ndarray, labels: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """RGB blend of the grayscale image with the class palette."""
    palette = np.asarray(LABEL_PALETTE[:3 * len(CLASS_NAMES)], dtype=np.float64).reshape(-1, 3)
    gray = np.repeat(np.asarray(image, dtype=np.float64)[..., None] * 255.0, 3, axis=2)
    rgb = (1 - alpha) * gray + alpha * palette[labels]
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def cmd_segment(args) -> None:
    out = _out_dir(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    raw = _read_png(args.image, "image").astype(np.float64) / 255.0
    if args.size and raw.shape != (args.size, args.size):
        raw = kernels.bilinear_upsample(raw, args.size, args.size)
    labels = predict(model, [raw])[0]
    save_label_png(out / "labels.png", labels)
    Image.fromarray(overlay(raw, labels), mode="RGB").save(out / "overlay.png", optimize=False)
    _write_config(out, args)
    counts = np.bincount(labels.ravel(), minlength=len(CLASS_NAMES))
    print(" ".join(f"{n}={int(c)}" for n, c in zip(CLASS_NAMES, counts)))


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="infarctseg", description="Myocardial scar segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--workers", type=int, default=1, help="threads for the convolution kernels")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output directory")
        if data:
            sp.add_argument("--data", help="manifest.json of a dataset")
            sp.add_argument("--size", type=int, default=None, help="resize inputs to SIZE x SIZE")

    g = sub.add_parser("gen-synth", help="generate a synthetic phantom dataset")
    common(g, data=False)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--scar-prob", type=float, default=0.9)
    g.add_argument("--slices-per-patient", type=int, default=10)
    g.set_defaults(func=cmd_gen_synth)

    w = sub.add_parser("weights", help="median-frequency class weights")
    common(w)
    w.add_argument("--frequencies", type=float, nargs="+",
                   help="class frequencies (background blood muscle scar) instead of --data")
    w.set_defaults(func=cmd_weights)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--model", required=True, help=f"one of {', '.join(MODELS)}")
    t.add_argument("--lr", type=float, default=TrainConfig.initial_lr)
    t.add_argument("--max-epochs", type=int, default=TrainConfig.max_epochs)
    t.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    t.add_argument("--patience", type=int, default=TrainConfig.patience)
    t.add_argument("--width", type=float, default=0.25, help="channel width multiplier")
    t.add_argument("--full-depth", action="store_true", help="use the full block counts")
    t.add_argument("--tap", default="conv1", help="low-level feature stage (name, index or 'auto')")
    t.add_argument("--no-augment", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="run config.json whose model must match the checkpoint")
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--tolerance", default="auto", help="bfscore distance tolerance in pixels or 'auto'")
    e.add_argument("--name", help="model name shown in the tables")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("segment", help="segment one image")
    common(s, data=False)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--size", type=int, default=None)
    s.set_defaults(func=cmd_segment)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "eval" and args.data is None:
            raise UsageError("eval needs --data")
        if args.command == "train" and args.data is None:
            raise UsageError("train needs --data")
        kernels.set_num_workers(args.workers)
        args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
