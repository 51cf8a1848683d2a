"""Command-line entry point: synth, train, eval, predict, gradcheck, pca-vis.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, ValidationError

from . import __version__
from .data import SynthSpec, generate_synthetic, load_dataset_root, read_rgb, write_png
from .errors import CheckpointError, ConfigurationError, DatasetError
from .glue import pca_project
from .gradcheck import gradcheck_model
from .metrics import evaluate_dataset, write_csv
from .model import ModelConfig, predict, prepare_inputs, toy_config
from .nn_core import resize_bilinear
from .trainer import TrainConfig, load_checkpoint, restore_model, train

log = logging.getLogger("sam2unext")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VERIFY = 0, 1, 2, 3


class DataPaths(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    root: str | None = None


class RunConfigFile(BaseModel):
    """Strict JSON run configuration; unknown keys at any level are rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    data: DataPaths = DataPaths()


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this contract reserves 2 for I/O."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"])
        if err["type"] == "extra_forbidden":
            parts.append(f"unknown key '{loc}'")
        else:
            parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def load_run_config(path: str | Path | None) -> RunConfigFile:
    if path is None:
        return RunConfigFile()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON: {exc}") from exc
    try:
        return RunConfigFile.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(f"{path}: {_format_validation(exc)}") from None


def write_resolved(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = SynthSpec(n=args.n, seed=args.seed, canvas=(args.size, args.size))
    out = generate_synthetic(spec, args.out)
    print(f"wrote {spec.n} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    overrides = {k: v for k, v in (("seed", args.seed), ("epochs", args.epochs)) if v is not None}
    if overrides:
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update=overrides)})
    root = args.data or cfg.data.root
    if root is None:
        raise UsageError("no training data: pass --data or set data.root in the config")
    cfg = cfg.model_copy(update={"data": DataPaths(root=str(root))})
    dataset = load_dataset_root(root)
    out = Path(args.out)
    write_resolved(out, cfg.model_dump(mode="json"))
    result = train(cfg.model, cfg.train, dataset, out_dir=out, resume=args.resume, max_steps=args.max_steps)
    last = result.rows[-1] if result.rows else None
    if last:
        print(f"step {last['step']} loss {last['total']:.6f}")
    print(f"checkpoint {result.checkpoints[-1]}")
    return EXIT_OK


def _predict_dir(model, images_dir: Path, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for p in sorted(images_dir.iterdir()):
        if p.suffix.lower() not in (".png", ".jpg", ".jpeg"):
            continue
        write_png(out_dir / f"{p.stem}.png", to_uint8(predict(model, p)))


def cmd_eval(args) -> int:
    out = Path(args.out)
    if args.checkpoint:
        if not args.data:
            raise UsageError("--checkpoint needs --data")
        model = restore_model(load_checkpoint(args.checkpoint))
        pred_dir, gt_dir = out / "preds", Path(args.data) / "masks"
        _predict_dir(model, Path(args.data) / "images", pred_dir)
    elif args.pred_dir and args.gt_dir:
        pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    else:
        raise UsageError("pass --pred-dir and --gt-dir, or --checkpoint and --data")
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    write_resolved(out, {
        "pred_dir": str(pred_dir), "gt_dir": str(gt_dir), "checkpoint": args.checkpoint,
        "name": args.name, "miou_threshold": args.miou_threshold, "extended": args.extended,
    })
    report = evaluate_dataset(pred_dir, gt_dir, name=args.name, miou_threshold=args.miou_threshold)
    report.write_json(out / "report.json")
    write_csv(out / "report.csv", [report], extended=args.extended)
    print((out / "report.csv").read_text(), end="")
    return EXIT_OK


def to_uint8(prob: np.ndarray) -> np.ndarray:
    return np.round(np.clip(prob, 0.0, 1.0) * 255.0).astype(np.uint8)


def cmd_predict(args) -> int:
    model = restore_model(load_checkpoint(args.checkpoint))
    prob = predict(model, args.image)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_png(args.out, to_uint8(prob))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_run_config(args.config).model if args.config else toy_config()
    report = gradcheck_model(cfg, seed=args.seed, per_tensor=args.per_tensor, tol=args.tol)
    print(report.table())
    if args.out:
        out = Path(args.out)
        write_resolved(out, {"model": cfg.model_dump(mode="json"), "seed": args.seed,
                             "per_tensor": args.per_tensor, "tol": args.tol})
        (out / "gradcheck.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if not report.passed:
        print(f"gradient check failed in: {', '.join(report.failing())}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


@torch.no_grad()
def pca_image(model, image: np.ndarray) -> np.ndarray:
    """(h, w, 3) uint8 map of the top-3 principal components of the auxiliary features."""
    if not model.cfg.has_aux:
        raise ConfigurationError("pca-vis needs a model with an auxiliary branch (aux_mode != 'none')")
    model.eval()
    dtype = next(model.parameters()).dtype
    _, low = prepare_inputs(image, model.cfg, dtype)
    aux = model.auxiliary(low)
    rgb = resize_bilinear(pca_project(aux, 3), image.shape[0], image.shape[1])
    return to_uint8(rgb[0].permute(1, 2, 0).numpy())


def cmd_pca_vis(args) -> int:
    model = restore_model(load_checkpoint(args.checkpoint))
    rgb = pca_image(model, read_rgb(args.image))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_png(args.out, rgb)
    print(f"wrote {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="sam2unext", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("synth", help="write a seeded synthetic shape dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=8, help="number of image/mask pairs")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--size", type=int, default=64, help="square canvas side in pixels")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a JSON run config")
    p.add_argument("--config", help="JSON file with model/train/data sections")
    p.add_argument("--data", help="dataset root with images/ and masks/ (overrides data.root)")
    p.add_argument("--out", required=True, help="output directory for log and checkpoints")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, help="stop after this many steps in this invocation")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred-dir", help="directory of predicted masks")
    p.add_argument("--gt-dir", help="directory of ground-truth masks")
    p.add_argument("--checkpoint", help="predict with this checkpoint first")
    p.add_argument("--data", help="dataset root used with --checkpoint")
    p.add_argument("--out", required=True, help="directory for report.json and report.csv")
    p.add_argument("--name", help="dataset name in the report")
    p.add_argument("--miou-threshold", type=float, default=0.5, help="binarization threshold for mIoU")
    p.add_argument("--extended", action="store_true", help="add mIoU and adaptive/mean/max F columns")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write a probability mask PNG for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="backprop vs finite differences per parameter group")
    p.add_argument("--config", help="JSON run config; only the model section is used (default: tiny config)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-tensor", type=int, default=3, help="entries checked per parameter tensor")
    p.add_argument("--tol", type=float, default=1e-4, help="maximum relative error")
    p.add_argument("--out", help="optional directory for gradcheck.json")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pca-vis", help="RGB view of the top-3 principal components of the auxiliary features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(func=cmd_pca_vis)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, ValidationError) as exc:
        msg = _format_validation(exc) if isinstance(exc, ValidationError) else str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
