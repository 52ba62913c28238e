"""Training objectives: cross-entropy, Dice, prototype and feature regularizers."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError
from .prototype import SoftMask
from .tensor import Tensor

RANK_TOL = 1e-8
DICE_SMOOTH = 1.0


class AllIgnoredWarning(UserWarning):
    """Every cell of the target was ignore-dominated; the loss is zero."""


@dataclass
class LossWeights:
    pp: float = 0.01
    fp: float = 0.01
    dice: float = 1.0
    margin: float = 1.0

    def __post_init__(self):
        for name in ("pp", "fp", "dice"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {v}")
        if not math.isfinite(self.margin) or self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")


@dataclass
class LossReport:
    ce: float = 0.0
    dice: float = 0.0
    pp1: float = 0.0
    pp2: float = 0.0
    fp1: float = 0.0
    fp2: float = 0.0
    total: float = 0.0

    COLUMNS = ("ce", "dice", "pp1", "pp2", "fp1", "fp2", "total")

    def row(self) -> list[float]:
        return [getattr(self, c) for c in self.COLUMNS]


def _class_axis(x: Tensor) -> int:
    return x.ndim - 3


def _included(target: SoftMask, dtype) -> np.ndarray:
    return target.included().astype(dtype)


def cross_entropy(logits, target: SoftMask) -> Tensor:
    """Soft-target cross-entropy averaged over cells that are not ignore-dominated."""
    z = T.as_tensor(logits)
    inc = _included(target, z.dtype)
    n_eff = inc.sum()
    if n_eff == 0:
        warnings.warn("cross_entropy: all cells ignored", AllIgnoredWarning, stacklevel=2)
        return T.as_tensor(np.zeros((), dtype=z.dtype))
    axis = _class_axis(z)
    logp = T.log_softmax(z, axis=axis)
    weight = target.fractions.astype(z.dtype) * np.expand_dims(inc, axis)
    return -T.tsum(logp * weight) / n_eff


def dice_loss(probs, target: SoftMask, smooth: float = DICE_SMOOTH) -> Tensor:
    """Macro soft Dice, ``1 - mean_k (2 sum p y + s) / (sum p + sum y + s)``."""
    p = T.as_tensor(probs)
    axis = _class_axis(p)
    inc = np.expand_dims(_included(target, p.dtype), axis)
    y = target.fractions.astype(p.dtype) * inc
    pm = p * inc
    reduce_axes = tuple(i for i in range(p.ndim) if i != axis)
    inter = T.tsum(pm * y, axis=reduce_axes)
    p_sum = T.tsum(pm, axis=reduce_axes)
    y_sum = y.sum(axis=reduce_axes)
    dice = (2.0 * inter + smooth) / (p_sum + (y_sum + smooth))
    return 1.0 - T.mean(dice)


def _as_blocks(protos) -> Tensor:
    p = T.as_tensor(protos)
    if p.ndim != 3:
        raise ConfigError(f"prototypes must be [K, m, C], got {p.shape}")
    return p


def loss_pp1(protos) -> Tensor:
    """Mean over classes of ``||P_k^T P_k - I_m||_F^2`` (Gram of the m sub-prototypes)."""
    p = _as_blocks(protos)
    k, m, c = p.shape
    if c < m:
        raise ConfigError(f"feature dim {c} < prototypes per class {m}: Gram cannot be identity")
    gram = T.matmul(p, T.swapaxes(p, 1, 2))
    resid = gram - np.eye(m, dtype=p.dtype)
    return T.tsum(resid * resid) / k


def orthonormalize(block, class_index: int | None = None) -> Tensor:
    """Modified Gram-Schmidt on the rows of ``block`` (``[m, C]`` or ``[K, m, C]``).

    Differentiable. Raises ``NumericError`` naming the offending class when a row
    is numerically in the span of the rows before it.
    """
    b = T.as_tensor(block)
    batched = b.ndim == 3
    x = b if batched else T.reshape(b, (1,) + b.shape)
    basis: list[Tensor] = []
    for j in range(x.shape[1]):
        v = x[:, j, :]
        scale = np.linalg.norm(v.data, axis=1)
        for q in basis:
            v = v - T.tsum(q * v, axis=1, keepdims=True) * q
        norm = T.frobenius_norm(v, axis=1, keepdims=True)
        bad = np.flatnonzero(norm.data[:, 0] <= RANK_TOL * np.maximum(scale, 1e-300))
        if bad.size:
            k = int(bad[0]) if batched else class_index
            where = "" if k is None else f" for class {k}"
            raise NumericError(f"rank-deficient prototype block{where} (row {j})")
        basis.append(v / norm)
    q = T.stack(basis, axis=1)
    return q if batched else q[0]


def _projector(q: Tensor) -> Tensor:
    return T.matmul(T.swapaxes(q, -1, -2), q)


def projection_metric(block_a, block_b, class_indices: tuple[int, int] | None = None) -> Tensor:
    """Projection distance between the spans of two ``[m, C]`` prototype blocks.

    ``||Q_a^T Q_a - Q_b^T Q_b||_F^2 = 2m - 2 ||Q_a Q_b^T||_F^2``, so identical spans
    give 0, two distinct coordinate lines give 1, and mutually orthogonal
    m-dimensional spans give ``sqrt(m)``.
    """
    ia, ib = class_indices or (None, None)
    diff = _projector(orthonormalize(block_a, ia)) - _projector(orthonormalize(block_b, ib))
    return T.frobenius_norm(diff) * (1.0 / math.sqrt(2.0))


def loss_pp2(protos) -> Tensor:
    """Negated sum of pairwise projection distances between class subspaces."""
    p = _as_blocks(protos)
    k = p.shape[0]
    if k < 2:
        return T.as_tensor(np.zeros((), dtype=p.dtype))
    projs = _projector(orthonormalize(p))
    ia, ib = np.triu_indices(k, 1)
    diff = projs[ia] - projs[ib]
    phi = T.frobenius_norm(diff, axis=(1, 2)) * (1.0 / math.sqrt(2.0))
    return -T.tsum(phi)


def _per_class_min(distances: Tensor, num_classes: int) -> Tensor:
    """``[..., K*m, H, W]`` -> min over each class's prototypes, ``[..., K, H, W]``."""
    km, h, w = distances.shape[-3:]
    lead = distances.shape[:-3]
    d = T.reshape(distances, lead + (num_classes, km // num_classes, h, w))
    return T.tmin(d, axis=len(lead) + 1)


def _pixel_weights(target: SoftMask, dtype) -> tuple[np.ndarray, np.ndarray]:
    """One-hot class membership (majority class of included cells) scaled by 1/N(k)."""
    k = target.num_classes
    labels = target.hard_labels()
    inc = target.included()
    axis = target.fractions.ndim - 3
    member = np.stack([(labels == c) & inc for c in range(k)], axis=axis)
    counts = member.sum(axis=tuple(i for i in range(member.ndim) if i != axis))
    scale = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    shape = [1] * member.ndim
    shape[axis] = k
    return member.astype(dtype), (member * scale.reshape(shape)).astype(dtype)


def loss_fp1(distances, target: SoftMask) -> Tensor:
    """Pull each pixel to the nearest sub-prototype of its own class."""
    d = T.as_tensor(distances)
    k = target.num_classes
    nearest = _per_class_min(d, k)
    _, weight = _pixel_weights(target, d.dtype)
    return T.tsum(nearest * weight)


def loss_fp2(distances, target: SoftMask, margin: float = 1.0) -> Tensor:
    """Hinge ``max(0, margin - d)`` on the nearest prototype of any other class."""
    if margin <= 0:
        raise ConfigError("margin must be positive")
    d = T.as_tensor(distances)
    k = target.num_classes
    axis = d.ndim - 3
    per_class = _per_class_min(d, k)
    member, weight = _pixel_weights(target, d.dtype)
    big = float(np.max(d.data)) * 2 + margin + 1.0
    other = T.tmin(per_class + member * big, axis=axis, keepdims=True)
    hinge = T.relu(margin - other)
    return T.tsum(hinge * weight)


def total_loss(terms: dict[str, Tensor], weights: LossWeights) -> tuple[Tensor, LossReport]:
    """Weighted sum ``ce + w_pp (pp1 + pp2) + w_fp (fp1 + fp2) + w_dice dice``.

    Missing terms count as zero.
    """
    zero = None
    got = {}
    for name in ("ce", "dice", "pp1", "pp2", "fp1", "fp2"):
        t = terms.get(name)
        if t is None:
            if zero is None:
                ref = next(iter(v for v in terms.values() if v is not None), None)
                dtype = ref.dtype if ref is not None else T.get_default_dtype()
                zero = T.as_tensor(np.zeros((), dtype=dtype))
            t = zero
        got[name] = T.as_tensor(t)
    total = got["ce"]
    if weights.pp:
        total = total + weights.pp * (got["pp1"] + got["pp2"])
    if weights.fp:
        total = total + weights.fp * (got["fp1"] + got["fp2"])
    if weights.dice:
        total = total + weights.dice * got["dice"]
    report = LossReport(**{n: got[n].item() for n in got}, total=total.item())
    return total, report


def recompute_total(report: LossReport, weights: LossWeights) -> float:
    return (report.ce + weights.pp * (report.pp1 + report.pp2)
            + weights.fp * (report.fp1 + report.fp2) + weights.dice * report.dice)

