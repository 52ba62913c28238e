"""Prototype exemplars ("this looks like that") and 2-D PCA feature projections."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import backbone
from . import tensor as T
from .prototype import PrototypeBank, downsample_labels, extract_centers, split_patches


@dataclass
class PrototypeExemplar:
    cls: int
    prototype: int
    sample: int  # -1 when missing
    row: int
    col: int
    distance: float
    dominant: int

    @property
    def missing(self) -> bool:
        return self.sample < 0


def patch_centers(features: np.ndarray, labels: np.ndarray, num_classes: int, downsample: int,
                  grid: tuple[int, int]):
    """Centers, validity and per-patch dominant class for one image.

    ``features`` is ``[C, H', W']``; ``grid`` is the logical patch grid (rows, cols).
    """
    c, h, w = features.shape
    gh, gw = grid
    mask = downsample_labels(labels, num_classes, downsample)
    f_l, y_l = split_patches(T.as_tensor(features), mask, h // gh, w // gw)
    centers = extract_centers(f_l, y_l)
    dominant = np.argmax(y_l.sum(axis=2), axis=1)
    return centers.centers.data, centers.valid, dominant


def find_exemplars(bank: PrototypeBank, images: np.ndarray, labels: np.ndarray,
                   params: backbone.BackboneParams, grid: tuple[int, int]) -> list[PrototypeExemplar]:
    """Nearest valid class-k training patch center for every prototype ``(k, i)``.

    Ties go to the earliest (sample, patch) in scan order.
    """
    k_total, m = bank.num_classes, bank.num_prototypes
    best_d = np.full((k_total, m), np.inf)
    best = np.full((k_total, m, 2), -1, dtype=np.int64)
    best_dom = np.full((k_total, m), -1, dtype=np.int64)
    protos = bank.prototypes.astype(np.float64)
    gw = grid[1]
    with T.no_grad():
        for s in range(len(images)):
            feats = backbone.forward(images[s], params).data
            centers, valid, dominant = patch_centers(feats, labels[s], k_total, params.downsample, grid)
            for k in range(k_total):
                idx = np.flatnonzero(valid[k])
                if idx.size == 0:
                    continue
                diff = centers[k, idx].astype(np.float64)[None, :, :] - protos[k][:, None, :]
                dist = np.sqrt((diff * diff).sum(axis=2))  # [m, n_valid]
                j = np.argmin(dist, axis=1)
                dmin = dist[np.arange(m), j]
                better = dmin < best_d[k]
                for i in np.flatnonzero(better):
                    best_d[k, i] = dmin[i]
                    best[k, i] = (s, idx[j[i]])
                    best_dom[k, i] = dominant[idx[j[i]]]
    out = []
    for k in range(k_total):
        for i in range(m):
            s, p = best[k, i]
            if s < 0:
                out.append(PrototypeExemplar(k, i, -1, -1, -1, float("nan"), -1))
            else:
                out.append(PrototypeExemplar(k, i, int(s), int(p // gw), int(p % gw),
                                             float(best_d[k, i]), int(best_dom[k, i])))
    return out


def write_exemplars_csv(exemplars: list[PrototypeExemplar], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "i", "sample", "row", "col", "distance", "dominant_class"])
        for e in exemplars:
            dist = "nan" if e.missing else f"{e.distance:.6f}"
            w.writerow([e.cls, e.prototype, e.sample, e.row, e.col, dist, e.dominant])


def _top_component(x: np.ndarray, rng: np.random.Generator, tol: float, max_iter: int,
                   previous: list[np.ndarray]) -> tuple[np.ndarray, float]:
    """Power iteration on ``x^T x``, kept orthogonal to ``previous``.

    The re-orthogonalization matters when the deflated residual is (numerically)
    zero: the iterate would otherwise drift to an arbitrary, non-orthogonal direction.
    """
    cov = x.T @ x

    def orth(v):
        for q in previous:
            v = v - (v @ q) * q
        return v / np.linalg.norm(v)

    v = orth(rng.standard_normal(cov.shape[0]))
    lam = 0.0
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return v, 0.0
        w = orth(w)
        if w @ v < 0:
            w = -w
        delta = np.linalg.norm(w - v)
        v = w
        lam = norm
        if delta < tol:
            break
    return v, lam


def pca_project(features: np.ndarray, dims: int = 2, tol: float = 1e-8, max_iter: int = 1000,
                seed: int = 0) -> np.ndarray:
    """Project ``[N, C]`` rows onto their top principal directions.

    Uses power iteration with deflation. Rank-0 input yields zeros and a warning.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("pca_project needs an [N, C] array with N >= 2")
    x = x - x.mean(axis=0)
    if not np.any(x):
        warnings.warn("pca_project: data has rank 0; returning zeros", RuntimeWarning, stacklevel=2)
        return np.zeros((x.shape[0], dims))
    rng = np.random.default_rng(seed)
    residual = x.copy()
    comps = []
    for _ in range(dims):
        v, _ = _top_component(residual, rng, tol, max_iter, comps)
        comps.append(v)
        residual = residual - np.outer(residual @ v, v)
    basis = np.stack(comps, axis=1)
    return x @ basis


def write_projection_csv(coords: np.ndarray, classes: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "class"])
        for (x, y), c in zip(coords[:, :2], classes):
            w.writerow([f"{x:.6f}", f"{y:.6f}", int(c)])
