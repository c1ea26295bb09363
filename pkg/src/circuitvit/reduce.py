"""Principal-component reduction of per-circuit embedding spaces.

One model is fitted per circuit; duplicated inference paths produce
geometrically distinct spaces, so their projections are never shared.
Fitting runs on the centered data matrix via SVD rather than an
assembled covariance, which is better conditioned at embedding widths
of several hundred.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError, ShapeError
from .model_io import read_container, write_container


@dataclass
class PcaModel:
    mean: np.ndarray  # (D,)
    basis: np.ndarray  # (out_dim, D), orthonormal rows
    explained_variance: np.ndarray  # (out_dim,), non-increasing

    @property
    def out_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def input_dim(self) -> int:
        return self.basis.shape[1]


def fit_pca(x: np.ndarray, out_dim: int) -> PcaModel:
    """Fit the top out_dim principal directions of x (N x D).

    The sign of each basis row is fixed so its largest-magnitude entry is
    positive, making fitted models reproducible across platforms.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise InvalidConfigError(f"need at least 2 samples to fit, got {n}")
    if out_dim < 1 or out_dim > min(n - 1, d):
        raise InvalidConfigError(
            f"out_dim {out_dim} not in [1, min(N-1, D)] = [1, {min(n - 1, d)}]"
        )
    mean = x.mean(axis=0)
    centered = x - mean
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:out_dim].copy()
    for row in basis:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    variance = (singular[:out_dim] ** 2) / (n - 1)
    return PcaModel(mean=mean, basis=basis, explained_variance=variance)


def transform(model: PcaModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(
            f"expected (N, {model.input_dim}) input, got shape {x.shape}"
        )
    return (x - model.mean) @ model.basis.T


def reconstruct(model: PcaModel, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.out_dim:
        raise ShapeError(f"expected (N, {model.out_dim}) input, got shape {z.shape}")
    return z @ model.basis + model.mean


def save_pca(model: PcaModel, path: str | Path) -> None:
    write_container(
        path,
        {"pca.mean": model.mean, "pca.basis": model.basis, "pca.var": model.explained_variance},
        {"format": "pca/1"},
    )


def load_pca(path: str | Path) -> PcaModel:
    tensors, _ = read_container(path)
    for name in ("pca.mean", "pca.basis", "pca.var"):
        if name not in tensors:
            raise ShapeError(f"pca container is missing {name}")
    return PcaModel(
        mean=tensors["pca.mean"].astype(np.float64),
        basis=tensors["pca.basis"].astype(np.float64),
        explained_variance=tensors["pca.var"].astype(np.float64),
    )
