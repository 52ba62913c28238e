"""Training loop, evaluation and run orchestration."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backbone, checkpoint, data
from . import tensor as T
from .classifier import class_logits, pairwise_distances, predict
from .config import RunConfig
from .errors import ConfigError, NumericError
from .losses import (LossReport, cross_entropy, dice_loss, loss_fp1, loss_fp2, loss_pp1,
                     loss_pp2, total_loss)
from .metrics import ConfusionMatrix, Scores, compute, write_csv
from .prototype import (PrototypeBank, assign_all, batch_prototypes, downsample_labels,
                        extract_centers, init_bank, momentum_update, split_patches)

log = logging.getLogger(__name__)


class TrainingDiverged(NumericError):
    """A step produced a non-finite loss."""


@dataclass
class Model:
    config: RunConfig
    params: backbone.BackboneParams
    bank: PrototypeBank
    optimizer: backbone.SGD
    epoch: int = 0

    @classmethod
    def create(cls, config: RunConfig) -> "Model":
        params = backbone.init_params(config.seed, config.feature_dim, config.downsample, config.hidden)
        rng = np.random.default_rng([config.seed, 1])
        bank = init_bank(config.num_classes, config.effective_prototypes, config.feature_dim, rng,
                         config.momentum)
        opt = backbone.SGD(config.lr, config.weight_decay).init(params.parameters())
        return cls(config, params, bank, opt)

    @classmethod
    def from_checkpoint(cls, ckpt: checkpoint.Checkpoint) -> "Model":
        return cls(ckpt.config, ckpt.params, ckpt.bank, ckpt.optimizer, ckpt.epoch)

    def to_checkpoint(self) -> checkpoint.Checkpoint:
        return checkpoint.Checkpoint(self.config, self.params, self.bank, self.optimizer, self.epoch)

    def features(self, images) -> T.Tensor:
        return backbone.forward(images, self.params)

    def predict(self, images) -> np.ndarray:
        with T.no_grad():
            return predict(self.features(images), self.bank, self.config.alpha)


@dataclass
class StepOutput:
    report: LossReport
    counts: np.ndarray


def _patch_size(config: RunConfig, h: int, w: int) -> tuple[int, int]:
    if h % config.grid_h or w % config.grid_w:
        raise ConfigError(f"{h}x{w} feature map cannot be split into a {config.grid_h}x{config.grid_w} grid")
    return h // config.grid_h, w // config.grid_w


def _pp_input(p_hat: T.Tensor, counts: np.ndarray, bank: PrototypeBank) -> T.Tensor:
    """Batch prototypes where assigned, the (constant) bank row elsewhere."""
    hit = (counts > 0)[:, :, None].astype(p_hat.dtype)
    return p_hat * hit + bank.prototypes.astype(p_hat.dtype) * (1 - hit)


def compute_losses(model: Model, images, labels: np.ndarray, rng: np.random.Generator | None):
    """Forward pass for one batch. Returns ``(total, report, p_hat, counts)``."""
    cfg = model.config
    m = cfg.effective_prototypes
    weights = cfg.loss_weights()
    feats = model.features(images)
    mask = downsample_labels(labels, cfg.num_classes, cfg.downsample)
    dist = pairwise_distances(feats, model.bank)
    logits = class_logits(dist, m, cfg.alpha)
    terms = {"ce": cross_entropy(logits, mask)}
    if weights.dice:
        terms["dice"] = dice_loss(T.softmax(logits, axis=logits.ndim - 3), mask)
    ph, pw = _patch_size(cfg, *feats.shape[-2:])
    f_l, y_l = split_patches(feats, mask, ph, pw)
    centers = extract_centers(f_l, y_l)
    assignments = assign_all(centers, model.bank, rng, cfg.tau, cfg.gumbel_noise)
    p_hat, counts = batch_prototypes(assignments, centers, m)
    if weights.pp:
        mixed = _pp_input(p_hat, counts, model.bank)
        terms["pp1"] = loss_pp1(mixed)
        try:
            terms["pp2"] = loss_pp2(mixed)
        except NumericError as exc:
            # Coincident batch prototypes (e.g. patches whose features are all
            # bias) leave the subspace undefined; drop the term for this step.
            log.warning("pp2 skipped: %s", exc)
    if weights.fp:
        terms["fp1"] = loss_fp1(dist, mask)
        terms["fp2"] = loss_fp2(dist, mask, weights.margin)
    total, report = total_loss(terms, weights)
    return total, report, p_hat, counts


def train_step(model: Model, images, labels: np.ndarray, rng: np.random.Generator, step: int = 0) -> StepOutput:
    params = model.params.parameters()
    backbone.zero_grad(params)
    total, report, p_hat, counts = compute_losses(model, images, labels, rng)
    if not np.isfinite(report.total) or not all(np.isfinite(report.row())):
        raise TrainingDiverged(f"non-finite loss at step {step}: {report}")
    total.backward()
    backbone.sgd_step(params, model.optimizer)
    momentum_update(model.bank, p_hat, counts)
    return StepOutput(report, counts)


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 16) -> ConfusionMatrix:
    cm = ConfusionMatrix(model.config.num_classes)
    d = model.config.downsample
    for start in range(0, len(images), batch_size):
        pred = model.predict(images[start : start + batch_size])
        gt = labels[start : start + batch_size]
        cm.accumulate(_upsample(pred, d), gt)
    return cm


def _upsample(pred: np.ndarray, d: int) -> np.ndarray:
    """Nearest-neighbour upsampling of low-resolution label maps to image size."""
    return np.repeat(np.repeat(pred, d, axis=-2), d, axis=-1)


def predict_full(model: Model, image: np.ndarray) -> np.ndarray:
    return _upsample(model.predict(image), model.config.downsample)


@dataclass
class TrainResult:
    model: Model
    history: list[dict] = field(default_factory=list)
    val_scores: Scores | None = None


def _log_header(cfg: RunConfig) -> list[str]:
    w = cfg.loss_weights()
    return [
        f"# prototypes={cfg.effective_prototypes} grid={cfg.grid_h}x{cfg.grid_w} baseline={cfg.baseline}",
        f"# w_pp={w.pp!r} w_fp={w.fp!r} w_dice={w.dice!r} margin={w.margin!r}",
    ]


def train(config: RunConfig, out_dir=None, train_data=None, val_data=None, resume: Model | None = None,
          stop_after_epoch: int | None = None) -> TrainResult:
    """Train for ``config.epochs`` epochs.

    Data defaults to the ``train``/``val`` splits of ``config.dataset``. Each
    epoch draws its shuffle and Gumbel noise from ``rng([seed, epoch])`` so a run
    resumed from an epoch-``e`` checkpoint replays the remaining epochs exactly.
    """
    if train_data is None:
        manifest = data.read_manifest(config.dataset)
        if manifest.spec.num_classes != config.num_classes:
            raise ConfigError(f"dataset has {manifest.spec.num_classes} classes, config says {config.num_classes}")
        train_data = data.load_split(manifest, "train")
        if val_data is None and manifest.size("val"):
            val_data = data.load_split(manifest, "val")
    model = resume or Model.create(config)
    cfg = model.config
    images, labels = train_data
    images = images.astype(np.float32, copy=False)
    out = Path(out_dir) if out_dir is not None else None
    log_rows = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        if resume is None or not log_path.exists():
            log_path.write_text("\n".join(_log_header(cfg)) + "\nstep," + ",".join(LossReport.COLUMNS) + "\n")
    result = TrainResult(model)
    n = len(images)
    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    with T.default_dtype(np.float32):
        while model.epoch < last_epoch:
            epoch = model.epoch
            rng = np.random.default_rng([cfg.seed, 2, epoch])
            order = rng.permutation(n)
            steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
            for b in range(steps_per_epoch):
                idx = np.sort(order[b * cfg.batch_size : (b + 1) * cfg.batch_size])
                step = epoch * steps_per_epoch + b
                try:
                    res = train_step(model, images[idx], labels[idx], rng, step)
                except NumericError as exc:
                    if out is not None:
                        _append_log(out, log_rows)
                        (out / f"nan_dump_step{step}.txt").write_text(
                            f"step={step}\nepoch={epoch}\nsamples={idx.tolist()}\nerror={exc}\n")
                    raise
                log_rows.append([step] + res.report.row())
            model.epoch += 1
            entry = {"epoch": model.epoch}
            if val_data is not None:
                scores = compute(evaluate(model, *val_data))
                result.val_scores = scores
                entry.update(miou=scores.miou, oa=scores.oa, mf1=scores.mf1)
                log.info("epoch %d val mIoU %.4f OA %.4f", model.epoch, scores.miou, scores.oa)
            result.history.append(entry)
            if out is not None:
                _append_log(out, log_rows)
                checkpoint.save(model.to_checkpoint(), out / "checkpoint.bin")
                if result.val_scores is not None:
                    write_csv(result.val_scores, out / "metrics_val.csv")
                _write_history(result.history, out / "history.csv")
    return result


def _append_log(out: Path, rows: list[list]) -> None:
    with open(out / "train_log.csv", "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in rows:
            w.writerow([row[0]] + [f"{v:.8g}" for v in row[1:]])
    rows.clear()


def _write_history(history: list[dict], path: Path) -> None:
    keys = ["epoch", "miou", "oa", "mf1"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for h in history:
            w.writerow([h["epoch"]] + [f"{h[k]:.6f}" if k in h else "" for k in keys[1:]])


def evaluate_split(model: Model, images: np.ndarray, labels: np.ndarray) -> Scores:
    with T.default_dtype(np.float32):
        return compute(evaluate(model, images.astype(np.float32, copy=False), labels))
