"""Nearest-prototype classification with the ``1 / (1 + alpha * t)`` similarity."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .prototype import PrototypeBank
from .tensor import Tensor

DIST_EPS = 1e-12


def _bank_matrix(bank) -> np.ndarray:
    p = bank.prototypes if isinstance(bank, PrototypeBank) else np.asarray(bank)
    return p.reshape(-1, p.shape[-1])


def pairwise_distances(features, bank, eps: float = DIST_EPS) -> Tensor:
    """Euclidean distance from every pixel to every prototype.

    ``features`` is ``[..., C, H, W]``; the result is ``[..., K*m, H, W]`` with
    prototypes in class-major order. The bank is treated as a constant.
    """
    f = T.as_tensor(features)
    protos = _bank_matrix(bank).astype(f.dtype, copy=False)
    c, h, w = f.shape[-3:]
    if protos.shape[1] != c:
        raise DimensionError(f"feature dim {c} does not match prototype dim {protos.shape[1]}")
    lead = f.shape[:-3]
    n_lead = int(np.prod(lead)) if lead else 1
    pix = T.transpose(T.reshape(f, (n_lead, c, h * w)), (0, 2, 1))  # [B, HW, C]
    d = T.sqrt(T.sq_distances(pix, protos) + eps)  # [B, HW, Km]
    d = T.transpose(d, (0, 2, 1))
    return T.reshape(d, lead + (protos.shape[0], h, w))


def similarity(distances, alpha: float = 1.0) -> Tensor:
    if alpha <= 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    d = T.as_tensor(distances)
    return 1.0 / (1.0 + alpha * d)


def class_logits(distances, num_prototypes: int, alpha: float = 1.0) -> Tensor:
    """Per-class score: the best similarity among that class's sub-prototypes."""
    d = T.as_tensor(distances)
    km, h, w = d.shape[-3:]
    if km % num_prototypes:
        raise DimensionError(f"{km} prototype maps not divisible by m={num_prototypes}")
    lead = d.shape[:-3]
    sim = similarity(d, alpha)
    sim = T.reshape(sim, lead + (km // num_prototypes, num_prototypes, h, w))
    return T.tmax(sim, axis=len(lead) + 1)


def predict(features, bank: PrototypeBank, alpha: float = 1.0) -> np.ndarray:
    """Winner-take-all label map: owner class of the most similar prototype."""
    with T.no_grad():
        sim = similarity(pairwise_distances(features, bank), alpha)
    winner = np.argmax(sim.data, axis=-3)
    return (winner // bank.num_prototypes).astype(np.int64)
