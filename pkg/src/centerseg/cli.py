"""Command-line entry point: ``centerseg <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint, data, gradcheck, interpret, train
from . import tensor as T
from .config import RunConfig, parse_value
from .errors import CenterSegError, ConfigError
from .metrics import write_csv

log = logging.getLogger("centerseg")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse already exits 2; keep the message format ours
        self.print_usage(sys.stderr)
        print(f"centerseg: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _bool(raw: str) -> bool:
    try:
        return parse_value("bool", raw)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    """One ``--key`` flag per RunConfig field; unset flags leave the config file value."""
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        if kind == "bool":
            p.add_argument(flag, dest=f.name, type=_bool, nargs="?", const=True, default=None)
        else:
            p.add_argument(flag, dest=f.name, type={"int": int, "float": float}.get(kind, str), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="centerseg", description="Prototype-based semantic segmentation on synthetic data.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="write a synthetic Voronoi dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--modes", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--n-train", type=int, default=200)
    g.add_argument("--n-val", type=int, default=50)
    g.add_argument("--n-test", type=int, default=50)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--texture", type=float, default=0.25)
    g.add_argument("--ignore-boundary", type=_bool, nargs="?", const=True, default=False)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key=value config file; flags override it")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    _add_config_flags(t)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", help="defaults to the dataset recorded in the checkpoint")
    e.add_argument("--split", default="test", choices=data.SPLITS)
    e.add_argument("--out", required=True)
    e.add_argument("--no-render", action="store_true", help="skip the prediction PNGs")

    pr = sub.add_parser("predict", help="segment image files")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("images", nargs="+")

    ip = sub.add_parser("inspect-prototypes", help="nearest training patch per prototype, plus PCA projection")
    ip.add_argument("--checkpoint", required=True)
    ip.add_argument("--dataset")
    ip.add_argument("--split", default="train", choices=data.SPLITS)
    ip.add_argument("--out", required=True)

    gc = sub.add_parser("grad-check", help="finite-difference audit of every loss term")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--eps", type=float, default=gradcheck.DEFAULT_EPS)
    gc.add_argument("--tol", type=float, default=gradcheck.DEFAULT_TOL)
    return parser


def cmd_generate_data(args) -> int:
    spec = data.DatasetSpec(num_classes=args.classes, modes_per_class=args.modes, height=args.height,
                            width=args.width, n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
                            noise=args.noise, seed=args.seed, texture=args.texture,
                            ignore_boundary=args.ignore_boundary)
    manifest = data.generate_dataset(spec, args.out)
    print(f"wrote {sum(manifest.size(s) for s in data.SPLITS)} samples, "
          f"{len(manifest.modes)} modes to {manifest.root}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    resume = None
    if args.resume:
        ckpt = checkpoint.load(args.resume)
        # Only the epoch budget may change on resume; everything else is the recorded run.
        config = ckpt.config.with_(**{k: v for k, v in overrides.items() if k == "epochs" and v is not None})
        resume = train.Model.from_checkpoint(ckpt)
        resume.config = config
    elif args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        config = RunConfig.from_text(text, **overrides)
    else:
        config = RunConfig(**{k: v for k, v in overrides.items() if v is not None})
    if not config.dataset:
        raise ConfigError("no dataset given (use --dataset or a config file)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.txt")
    result = train.train(config, out, resume=resume)
    if result.val_scores is not None:
        print(f"epoch {result.model.epoch} val mIoU {result.val_scores.miou:.4f}")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return EXIT_OK


def _load_model(path) -> train.Model:
    return train.Model.from_checkpoint(checkpoint.load(path))


def _dataset_for(model: train.Model, override: str | None) -> data.Manifest:
    root = override or model.config.dataset
    if not root:
        raise ConfigError("no dataset given and none recorded in the checkpoint")
    manifest = data.read_manifest(root)
    if manifest.spec.num_classes != model.config.num_classes:
        raise ConfigError(f"checkpoint has {model.config.num_classes} classes, "
                          f"dataset has {manifest.spec.num_classes}")
    return manifest


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    manifest = _dataset_for(model, args.dataset)
    if not manifest.size(args.split):
        raise ConfigError(f"split {args.split!r} is empty in {manifest.root}")
    images, labels = data.load_split(manifest, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scores = train.evaluate_split(model, images, labels)
    write_csv(scores, out / f"metrics_{args.split}.csv")
    if not args.no_render:
        render_dir = out / f"pred_{args.split}"
        render_dir.mkdir(exist_ok=True)
        with T.default_dtype(np.float32):
            for i in range(len(images)):
                pred = train.predict_full(model, images[i : i + 1])[0]
                data.render_prediction(pred, path=render_dir / f"{i}.png", num_classes=model.config.num_classes)
    print(f"{args.split}: mIoU {scores.miou:.4f} OA {scores.oa:.4f} mF1 {scores.mf1:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _load_model(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with T.default_dtype(np.float32):
        for path in args.images:
            image = data.read_image(path).transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)
            pred = train.predict_full(model, image[None])[0]
            stem = Path(path).stem
            data.save_label_map(pred, out / f"{stem}_labels.pgm")
            data.render_prediction(pred, path=out / f"{stem}_pred.png", num_classes=model.config.num_classes)
            print(f"{path} -> {out / (stem + '_labels.pgm')}")
    return EXIT_OK


def projection_points(model: train.Model, images: np.ndarray, labels: np.ndarray):
    """Every valid training patch center with its class, ``([N, C], [N])``."""
    cfg = model.config
    pts, cls = [], []
    with T.no_grad(), T.default_dtype(np.float32):
        for s in range(len(images)):
            feats = model.features(images[s]).data
            centers, valid, _ = interpret.patch_centers(feats, labels[s], cfg.num_classes, cfg.downsample,
                                                        (cfg.grid_h, cfg.grid_w))
            for k in range(cfg.num_classes):
                idx = np.flatnonzero(valid[k])
                pts.append(centers[k, idx])
                cls.append(np.full(idx.size, k))
    return np.concatenate(pts), np.concatenate(cls)


def cmd_inspect_prototypes(args) -> int:
    model = _load_model(args.checkpoint)
    manifest = _dataset_for(model, args.dataset)
    images, labels = data.load_split(manifest, args.split)
    cfg = model.config
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with T.default_dtype(np.float32):
        exemplars = interpret.find_exemplars(model.bank, images, labels, model.params, (cfg.grid_h, cfg.grid_w))
    interpret.write_exemplars_csv(exemplars, out / "exemplars.csv")
    pts, cls = projection_points(model, images, labels)
    interpret.write_projection_csv(interpret.pca_project(pts), cls, out / "projection.csv")
    found = [e for e in exemplars if not e.missing]
    agree = sum(e.dominant == e.cls for e in found)
    print(f"{len(found)} exemplars ({len(exemplars) - len(found)} missing); "
          f"{agree} match their prototype's class")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    errors = gradcheck.run(args.seed, args.eps)
    text, ok = gradcheck.report(errors, args.tol)
    print(text)
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "inspect-prototypes": cmd_inspect_prototypes,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"centerseg: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CenterSegError as exc:
        print(f"centerseg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
