"""Training-time prototype generation.

Pipeline for one batch: labels are turned into per-cell class fractions at
feature resolution, features and masks are tiled into patches, each class's
masked mean feature per patch becomes a class center, centers are hard-assigned
to the class's sub-prototypes with a Gumbel-softmax straight-through estimator,
assigned centers are averaged into batch prototypes, and the prototype bank
tracks those by exponential moving average.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataError, DimensionError, NumericError
from .tensor import Tensor

IGNORE_INDEX = 255
MASS_EPS = 1e-12
GUMBEL_CLAMP = 1e-12


@dataclass
class SoftMask:
    """Per-cell class fractions ``Y`` (``[..., K, H', W']``) and the ignored fraction."""

    fractions: np.ndarray
    ignore: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.fractions.shape[-3]

    def included(self) -> np.ndarray:
        """Cells that are not ignore-dominated (ignored fraction <= 0.5)."""
        return self.ignore <= 0.5

    def hard_labels(self) -> np.ndarray:
        """Majority class per cell (first class on ties)."""
        return np.argmax(self.fractions, axis=-3)


def downsample_labels(labels: np.ndarray, num_classes: int, d: int,
                      ignore_index: int = IGNORE_INDEX) -> SoftMask:
    """One-hot encode ``labels`` (``[H,W]`` or ``[N,H,W]``) and average over d x d blocks."""
    labels = np.asarray(labels)
    h, w = labels.shape[-2:]
    if h % d or w % d:
        raise DimensionError(f"label map {h}x{w} not divisible by {d}")
    valid = labels < num_classes
    bad = ~valid & (labels != ignore_index)
    if np.any(bad) or np.any(labels < 0):
        raise DataError(f"label values outside [0,{num_classes}) and ignore index {ignore_index}")
    lead = labels.shape[:-2]
    onehot = np.zeros(lead + (num_classes, h, w))
    for k in range(num_classes):
        onehot[..., k, :, :] = labels == k
    block = onehot.reshape(lead + (num_classes, h // d, d, w // d, d))
    fractions = block.mean(axis=(-3, -1))
    ign = (labels == ignore_index).astype(np.float64)
    ignore = ign.reshape(lead + (h // d, d, w // d, d)).mean(axis=(-3, -1))
    return SoftMask(fractions, ignore)


def _grid(h: int, w: int, patch_h: int, patch_w: int) -> tuple[int, int]:
    if patch_h <= 0 or patch_w <= 0 or h % patch_h or w % patch_w:
        raise DimensionError(f"{h}x{w} map cannot be tiled by {patch_h}x{patch_w} patches")
    return h // patch_h, w // patch_w


def split_patches(features, mask: SoftMask, patch_h: int, patch_w: int):
    """Tile features ``[..., C, H', W']`` and the mask into non-overlapping patches.

    Returns ``(F_l, Y_l)`` with shapes ``[n, C, patch_h*patch_w]`` and
    ``[n, K, patch_h*patch_w]``, patches in raster order (batch-major when a
    leading batch axis is present).
    """
    f = T.as_tensor(features)
    y = mask.fractions
    h, w = f.shape[-2:]
    if y.shape[-2:] != (h, w):
        raise DimensionError(f"mask {y.shape[-2:]} and features {(h, w)} disagree")
    gh, gw = _grid(h, w, patch_h, patch_w)
    return _tile(f, patch_h, patch_w, gh, gw), _tile_np(y, patch_h, patch_w, gh, gw)


def _tile(f: Tensor, ph: int, pw: int, gh: int, gw: int) -> Tensor:
    batched = f.ndim == 4
    x = f if batched else T.reshape(f, (1,) + f.shape)
    n, c = x.shape[:2]
    x = T.reshape(x, (n, c, gh, ph, gw, pw))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (n * gh * gw, c, ph * pw))


def _tile_np(y: np.ndarray, ph: int, pw: int, gh: int, gw: int) -> np.ndarray:
    x = y if y.ndim == 4 else y[None]
    n, c = x.shape[:2]
    x = x.reshape(n, c, gh, ph, gw, pw).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n * gh * gw, c, ph * pw)


def reassemble_patches(patches, height: int, width: int, patch_h: int, patch_w: int):
    """Inverse of the tiling in ``split_patches``; works on arrays or tensors."""
    gh, gw = _grid(height, width, patch_h, patch_w)
    data = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    n_total, c = data.shape[:2]
    n = n_total // (gh * gw)
    x = data.reshape(n, gh, gw, c, patch_h, patch_w).transpose(0, 3, 1, 4, 2, 5)
    x = x.reshape(n, c, height, width)
    return x[0] if n == 1 else x


@dataclass
class ClassCenters:
    """Masked mean feature per (class, patch): ``S`` ``[K, n, C]`` plus validity and mass."""

    centers: Tensor
    valid: np.ndarray
    mass: np.ndarray

    @property
    def num_patches(self) -> int:
        return self.centers.shape[1]

    def of_class(self, k: int) -> Tensor:
        """The valid centers of class ``k``, ``[n_valid, C]``."""
        idx = np.flatnonzero(self.valid[k])
        return T.getitem(self.centers, (k, idx))


def extract_centers(f_l, y_l: np.ndarray) -> ClassCenters:
    """Class centers from patch features ``[n, C, P]`` and patch masks ``[n, K, P]``."""
    f_l = T.as_tensor(f_l)
    y_l = np.asarray(y_l, dtype=f_l.dtype)
    if f_l.shape[0] != y_l.shape[0] or f_l.shape[2] != y_l.shape[2]:
        raise DimensionError(f"patch features {f_l.shape} and masks {y_l.shape} disagree")
    mass = y_l.sum(axis=2).T  # [K, n]
    sums = T.matmul(T.as_tensor(y_l), T.swapaxes(f_l, 1, 2))  # [n, K, C]
    sums = T.transpose(sums, (1, 0, 2))
    denom = np.maximum(mass, MASS_EPS)[:, :, None].astype(f_l.dtype)
    return ClassCenters(sums / denom, mass > 0, mass)


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard Gumbel(0, 1) draws ``-log(-log(u))``."""
    u = rng.uniform(0.0, 1.0, size=shape)
    u = np.clip(u, GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


@dataclass
class AssignmentMatrix:
    """Hard assignment ``A_hat`` (one-hot forward, soft backward) and its soft source."""

    hard: Tensor
    soft: Tensor
    logits: Tensor

    def choices(self) -> np.ndarray:
        return np.argmax(self.hard.data, axis=1)


def gumbel_assign(centers_k, prototypes_k, rng: np.random.Generator | None = None,
                  tau: float = 1.0, noise: bool = True) -> AssignmentMatrix:
    """Assign each valid center of one class to one of that class's prototypes.

    ``centers_k`` is ``[n_v, C]``; ``prototypes_k`` is ``[m, C]`` and enters under
    stop-gradient. Softmax runs over the prototype axis.
    """
    s = T.as_tensor(centers_k)
    p = T.stop_gradient(prototypes_k)
    if s.shape[0] < 1:
        raise DimensionError("gumbel_assign needs at least one valid center")
    logits = T.matmul(s, p.T)
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("gumbel_assign: non-finite center/prototype logits")
    z = logits
    if noise:
        if rng is None:
            raise ValueError("gumbel_assign with noise needs an rng")
        z = z + sample_gumbel(rng, logits.shape).astype(logits.dtype)
    soft = T.softmax(z * (1.0 / tau), axis=1)
    hard = np.zeros_like(soft.data)
    hard[np.arange(hard.shape[0]), np.argmax(soft.data, axis=1)] = 1.0
    return AssignmentMatrix(T.straight_through(hard, soft), soft, logits)


def batch_prototypes(assignments: list[AssignmentMatrix | None], centers: ClassCenters,
                     num_prototypes: int) -> tuple[Tensor, np.ndarray]:
    """Average the centers hard-assigned to each prototype.

    ``assignments[k]`` is ``None`` for classes with no valid center. Returns
    ``P_hat`` ``[K, m, C]`` (zero rows where nothing was assigned) and counts ``[K, m]``.
    """
    k_total, _, c = centers.centers.shape
    rows, counts = [], np.zeros((k_total, num_prototypes), dtype=np.int64)
    zero = T.as_tensor(np.zeros((num_prototypes, c), dtype=centers.centers.dtype))
    for k in range(k_total):
        a = assignments[k]
        if a is None:
            rows.append(zero)
            continue
        n_i = a.hard.data.sum(axis=0).round().astype(np.int64)
        counts[k] = n_i
        summed = T.matmul(T.swapaxes(a.hard, 0, 1), centers.of_class(k))  # [m, C]
        rows.append(summed / np.maximum(n_i, 1)[:, None].astype(summed.dtype))
    return T.stack(rows, axis=0), counts


def assign_all(centers: ClassCenters, bank: "PrototypeBank", rng: np.random.Generator | None,
               tau: float = 1.0, noise: bool = True) -> list[AssignmentMatrix | None]:
    """Run ``gumbel_assign`` for every class that has at least one valid center."""
    out: list[AssignmentMatrix | None] = []
    for k in range(bank.num_classes):
        if not centers.valid[k].any():
            out.append(None)
            continue
        out.append(gumbel_assign(centers.of_class(k), bank.prototypes[k], rng, tau, noise))
    return out


@dataclass
class PrototypeBank:
    """``K x m x C`` prototype buffer updated only by momentum; never on the tape."""

    prototypes: np.ndarray
    momentum: float = 0.999
    update_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.update_counts is None:
            self.update_counts = np.zeros(self.prototypes.shape[:2], dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[1]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[2]

    def owners(self) -> np.ndarray:
        """Class index of each flattened prototype (length ``K*m``)."""
        return np.repeat(np.arange(self.num_classes), self.num_prototypes)


def init_bank(num_classes: int, num_prototypes: int, dim: int, rng: np.random.Generator,
              momentum: float = 0.999, dtype=np.float32) -> PrototypeBank:
    """Unit-normal rows scaled to unit L2 norm."""
    p = rng.standard_normal((num_classes, num_prototypes, dim))
    p /= np.linalg.norm(p, axis=2, keepdims=True)
    return PrototypeBank(p.astype(dtype), momentum)


def momentum_update(bank: PrototypeBank, batch_protos, counts: np.ndarray) -> None:
    """``P <- mu P + (1 - mu) P_hat`` on slots that received at least one center."""
    p_hat = batch_protos.data if isinstance(batch_protos, Tensor) else np.asarray(batch_protos)
    if p_hat.shape != bank.prototypes.shape or counts.shape != bank.prototypes.shape[:2]:
        raise DimensionError("momentum_update: shapes do not match the bank")
    mu = bank.momentum
    hit = counts > 0
    updated = mu * bank.prototypes + (1 - mu) * p_hat
    bank.prototypes[hit] = updated[hit].astype(bank.prototypes.dtype, copy=False)
    bank.update_counts += hit
