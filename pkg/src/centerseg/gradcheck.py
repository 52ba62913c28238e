"""Finite-difference audit of every loss term on a small seeded instance.

The differentiation variable is the feature map of a 2-class 8x8 batch
(``C=4``, ``d=1``, 2x2 patch grid, ``m=2``). Hard prototype assignments are
computed once from detached centers and then held fixed: the straight-through
gradient is a surrogate by design, so only the pathwise derivative through the
centers is comparable with central differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .classifier import class_logits, pairwise_distances
from .losses import (LossWeights, cross_entropy, dice_loss, loss_fp1, loss_fp2, loss_pp1, loss_pp2,
                     total_loss)
from .prototype import (AssignmentMatrix, SoftMask, assign_all, batch_prototypes, downsample_labels,
                        extract_centers, init_bank, split_patches)

TERMS = ("ce", "dice", "pp1", "pp2", "fp1", "fp2", "total")
DEFAULT_TOL = 1e-3
DEFAULT_EPS = 1e-5


@dataclass
class Instance:
    features: np.ndarray  # [N, C, H, W]
    mask: SoftMask
    bank: np.ndarray  # [K, m, C]
    hard: list[np.ndarray | None]  # frozen one-hot assignments per class
    patch: tuple[int, int]
    weights: LossWeights


def make_instance(seed: int = 0, num_classes: int = 2, num_prototypes: int = 2, dim: int = 4,
                  size: int = 8, batch: int = 1, margin: float = 2.0) -> Instance:
    rng = np.random.default_rng(seed)
    feats = rng.normal(0.0, 0.5, size=(batch, dim, size, size))
    labels = np.zeros((batch, size, size), dtype=np.int64)
    for b in range(batch):
        cut = rng.integers(2, size - 2)
        labels[b, :, cut:] = 1
        labels[b, rng.integers(0, size), rng.integers(0, size)] = 255
    mask = downsample_labels(labels, num_classes, 1)
    bank = init_bank(num_classes, num_prototypes, dim, rng, dtype=np.float64)
    patch = (size // 2, size // 2)
    with T.default_dtype(np.float64), T.no_grad():
        f_l, y_l = split_patches(T.Tensor(feats), mask, *patch)
        assigned = assign_all(extract_centers(f_l, y_l), bank, rng, tau=1.0, noise=True)
    hard = [None if a is None else a.hard.data.copy() for a in assigned]
    return Instance(feats, mask, bank.prototypes, hard, patch,
                    LossWeights(pp=0.01, fp=0.01, dice=1.0, margin=margin))


def _terms(inst: Instance, x: T.Tensor) -> dict[str, T.Tensor]:
    k, m, _ = inst.bank.shape
    dist = pairwise_distances(x, inst.bank)
    logits = class_logits(dist, m)
    f_l, y_l = split_patches(x, inst.mask, *inst.patch)
    centers = extract_centers(f_l, y_l)
    frozen = [None if h is None else AssignmentMatrix(T.as_tensor(h), T.as_tensor(h), T.as_tensor(h))
              for h in inst.hard]
    p_hat, counts = batch_prototypes(frozen, centers, m)
    hit = (counts > 0)[:, :, None].astype(np.float64)
    protos = p_hat * hit + inst.bank * (1 - hit)
    return {
        "ce": cross_entropy(logits, inst.mask),
        "dice": dice_loss(T.softmax(logits, axis=1), inst.mask),
        "pp1": loss_pp1(protos),
        "pp2": loss_pp2(protos),
        "fp1": loss_fp1(dist, inst.mask),
        "fp2": loss_fp2(dist, inst.mask, inst.weights.margin),
    }


def term_function(inst: Instance, name: str) -> Callable[[T.Tensor], T.Tensor]:
    if name not in TERMS:
        raise KeyError(name)

    def f(x: T.Tensor) -> T.Tensor:
        terms = _terms(inst, x)
        if name == "total":
            return total_loss(terms, inst.weights)[0]
        return terms[name]

    return f


def run(seed: int = 0, eps: float = DEFAULT_EPS) -> dict[str, float]:
    """Max relative error per term, in ``TERMS`` order."""
    with T.default_dtype(np.float64):
        inst = make_instance(seed)
        return {name: T.finite_diff_check(term_function(inst, name), inst.features, eps) for name in TERMS}


def report(errors: dict[str, float], tol: float = DEFAULT_TOL) -> tuple[str, bool]:
    lines, ok = [], True
    for name, err in errors.items():
        passed = err <= tol
        ok &= passed
        lines.append(f"{name:<6} max_rel_err={err:.3e} {'ok' if passed else 'FAIL'}")
    return "\n".join(lines), ok
