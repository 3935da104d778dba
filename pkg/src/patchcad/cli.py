"""Command-line entry point: ``patchcad {synth,train,evaluate,diagnose,saliency}``.

Exit codes: 0 success (or a control diagnosis), 1 error, 2 patient diagnosis.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import modelfile
from .dataio import (
    IMAGE_SIZE,
    Label,
    load_corpus,
    load_image,
    normalize_array,
    split,
    write_synthetic_corpus,
)
from .diagnosis import diagnose, display_rgb, model_checksum, render_overlay, write_png_rgb
from .errors import BadOrigin, CadError, InsufficientData
from .evaluation import accumulate, metrics, metrics_table
from .network import NetworkModel
from .saliency import input_saliency, layer_saliency, red_overlay
from .tensor import make_rng
from .training import AdamConfig, predict, train

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PATIENT = 2

MODEL_NAME = "model.cadcnn"


@dataclass
class RunConfig:
    alpha: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    seed: int = 0
    max_epochs: int = 10
    data: str = "data"
    out: str = "run"
    channels: str = "2ch"
    augmentation: str = "random"
    train_fraction: float = 0.8
    validation_fraction: float = 0.1

    def adam(self) -> AdamConfig:
        return AdamConfig(self.alpha, self.beta1, self.beta2, self.epsilon, self.batch_size)

    @property
    def in_channels(self) -> int:
        return 3 if self.channels == "rgb" else 2


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _load_split(data_root, channels, seed, train_fraction, validation_fraction):
    root = Path(data_root)
    if not root.is_dir():
        raise InsufficientData(f"data root {root} does not exist")
    images = load_corpus(root, channels)
    rng = make_rng(seed)
    return split(images, rng, train_fraction, validation_fraction), rng


# ---------------------------------------------------------------------------
# commands


def cmd_synth(count_per_class: int, seed: int, out_dir, size: int = IMAGE_SIZE) -> dict:
    if count_per_class < 1:
        raise ValueError("count must be at least 1")
    return write_synthetic_corpus(out_dir, count_per_class, seed, size)


def cmd_train(config: RunConfig, progress=print) -> dict:
    """Train on ``config.data`` and write ``model.cadcnn`` and ``train_report.json``."""
    # one generator drives the split, initialization, shuffling and dropout, in that order
    data, rng = _load_split(
        config.data, config.channels, config.seed, config.train_fraction, config.validation_fraction
    )
    model = NetworkModel.initialize(rng, in_channels=config.in_channels)
    report = train(
        model, data, config.adam(), rng, max_epochs=config.max_epochs,
        augmentation=config.augmentation, progress=progress,
    )
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    metadata = {
        "format_version": 1,
        "channels": config.channels,
        "training_seed": config.seed,
        "config": {k: v for k, v in asdict(config).items() if k not in ("data", "out")},
        "split": data.image_ids(),
        "metrics": {
            "best_val_accuracy": report.best_val_accuracy,
            "best_epoch": report.best_epoch,
            "stopping_epoch": report.stopping_epoch,
        },
    }
    modelfile.save(report.model, out / MODEL_NAME, metadata)
    summary = {
        "model": str(out / MODEL_NAME),
        "model_checksum": model_checksum(report.model),
        "split_sizes": {k: len(v) for k, v in data.image_ids().items()},
        **report.as_dict(),
    }
    _write_json(out / "train_report.json", summary)
    return summary


def cmd_evaluate(model_path, data_root, out_dir=None) -> dict:
    """Patch- and image-level metrics on the test split recorded in the model file."""
    model, header = modelfile.load(model_path)
    cfg = header.get("config", {})
    data, _ = _load_split(
        data_root,
        header.get("channels", "2ch"),
        header.get("training_seed", 0),
        cfg.get("train_fraction", 0.8),
        cfg.get("validation_fraction", 0.1),
    )
    recorded = header.get("split", {}).get("test")
    if recorded is not None and recorded != data.image_ids()["test"]:
        raise InsufficientData("test split of this corpus differs from the one the model was trained with")

    x = np.stack([normalize_array(p.pixels) for p in data.test])
    probs = predict(model, x)
    patch_cm = accumulate(
        [Label.CONTROL if p >= 0.5 else Label.PATIENT for p in probs], [p.label for p in data.test]
    )
    reports = [diagnose(model, im) for im in data.test_images]
    image_cm = accumulate([r.overall_label for r in reports], [im.label for im in data.test_images])

    rows = {}
    result = {"model_checksum": model_checksum(model), "rows": []}
    for system, size, cm in (
        ("Patch", f"{model.patch_size}x{model.patch_size}", patch_cm),
        ("Image", "x".join(str(v) for v in data.test_images[0].pixels.shape[1:]), image_cm),
    ):
        m = metrics(cm)
        rows[(system, size)] = m
        result["rows"].append(
            {"system": system, "size": size, "confusion": cm.as_dict(), **m.as_dict(),
             "rounded": dict(zip(("accuracy", "precision", "recall", "f1"), m.rounded(2)))}
        )
    result["table"] = metrics_table(rows)
    result["images"] = [
        {"source": r.source, "truth": im.label.value, "predicted": r.overall_label.value, "score": r.score}
        for r, im in zip(reports, data.test_images)
    ]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "evaluation.json", result)
        (out / "evaluation.txt").write_text(result["table"] + "\n", encoding="utf-8")
    return result


def cmd_diagnose(model_path, image_path, out_dir, channels: str | None = None) -> dict:
    model, header = modelfile.load(model_path)
    image = load_image(image_path, None, channels or header.get("channels", "2ch"))
    report = diagnose(model, image)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    write_png_rgb(render_overlay(image, report), out / f"{stem}_overlay.png")
    payload = report.as_dict()
    _write_json(out / f"{stem}_report.json", payload)
    return payload


def parse_origin(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise BadOrigin(f"origin must be 'row,col', got {text!r}") from None
    return r, c


def cmd_saliency(
    model_path, image_path, origin, layer=None, out_dir=".", target="control", overlay=False
) -> list[Path]:
    model, header = modelfile.load(model_path)
    image = load_image(image_path, None, header.get("channels", "2ch"))
    s = model.patch_size
    r, c = origin
    h, w = image.pixels.shape[1:]
    if r % s or c % s or not (0 <= r < h and 0 <= c < w) or r + s > h or c + s > w:
        raise BadOrigin(f"origin {origin} is not a patch origin on the {s}-pixel grid of a {h}x{w} image")
    raw_patch = image.pixels[:, r : r + s, c : c + s]
    patch = normalize_array(raw_patch)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    stem = f"{Path(image_path).stem}_r{r}_c{c}_{Label.parse(target).value}"

    sal = input_saliency(model, patch, target)
    written.append(out / f"{stem}_input.png")
    write_png_rgb(np.repeat(sal.to_uint8()[..., None], 3, axis=-1), written[-1])
    if overlay:
        written.append(out / f"{stem}_input_overlay.png")
        write_png_rgb(red_overlay(display_rgb(raw_patch), sal), written[-1])

    if layer is not None:
        indices = (1, 2, 3) if str(layer) == "all" else (int(layer),)
        for k in indices:
            m = layer_saliency(model, patch, k, target)
            written.append(out / f"{stem}_conv{k}.png")
            write_png_rgb(np.repeat(m.to_uint8()[..., None], 3, axis=-1), written[-1])
    return written


# ---------------------------------------------------------------------------
# argument parsing


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = RunConfig()
    p.add_argument("--data", required=True, help="corpus root with control/ and patient/ folders")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--alpha", type=float, default=d.alpha)
    p.add_argument("--beta1", type=float, default=d.beta1)
    p.add_argument("--beta2", type=float, default=d.beta2)
    p.add_argument("--epsilon", type=float, default=d.epsilon)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--max-epochs", type=int, default=d.max_epochs)
    p.add_argument("--channels", choices=("2ch", "rgb"), default=d.channels)
    p.add_argument("--augment", choices=("random", "full", "none"), default=d.augmentation)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchcad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic control/patient corpus")
    p.add_argument("--count", type=int, required=True, help="images per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=IMAGE_SIZE)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on a corpus")
    _add_train_flags(p)

    p = sub.add_parser("evaluate", help="metrics on the held-out test split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("diagnose", help="diagnose one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channels", choices=("2ch", "rgb"), default=None)

    p = sub.add_parser("saliency", help="saliency maps for one patch")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--origin", required=True, help="row,col of the patch's top-left pixel")
    p.add_argument("--layer", choices=("1", "2", "3", "all"), default=None)
    p.add_argument("--class", dest="target", choices=("control", "patient"), default="control")
    p.add_argument("--overlay", action="store_true", help="also write the saliency blended over the patch")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            manifest = cmd_synth(args.count, args.seed, args.out, args.size)
            print(f"wrote {len(manifest['images'])} images to {args.out}")
            return EXIT_OK
        if args.command == "train":
            config = RunConfig(
                alpha=args.alpha, beta1=args.beta1, beta2=args.beta2, epsilon=args.epsilon,
                batch_size=args.batch_size, seed=args.seed, max_epochs=args.max_epochs,
                data=args.data, out=args.out, channels=args.channels, augmentation=args.augment,
            )
            summary = cmd_train(config)
            print(f"saved {summary['model']} (best epoch {summary['best_epoch']})")
            return EXIT_OK
        if args.command == "evaluate":
            result = cmd_evaluate(args.model, args.data, args.out)
            print(result["table"])
            return EXIT_OK
        if args.command == "diagnose":
            report = cmd_diagnose(args.model, args.image, args.out, args.channels)
            print(f"{report['overall_label']}  score {report['score']:.2f}%")
            return EXIT_OK if report["overall_label"] == Label.CONTROL.value else EXIT_PATIENT
        if args.command == "saliency":
            for path in cmd_saliency(
                args.model, args.image, parse_origin(args.origin), args.layer, args.out, args.target, args.overlay
            ):
                print(path)
            return EXIT_OK
    except (CadError, OSError, ValueError) as exc:
        print(f"patchcad: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_ERROR  # unreachable: argparse enforces a command


if __name__ == "__main__":
    sys.exit(main())
