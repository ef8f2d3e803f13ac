"""Frame-descriptor construction from convolutional feature maps.

A frame is represented by a stack of K activation grids (one per tapped
network layer). Two pooling modes reduce each grid to a per-channel vector:

* ``imac``: global max over spatial positions, per channel.
* ``l3-irmac``: the grid is split into a 3x3 arrangement of contiguous
  regions, each region is max-pooled, the nine regional vectors are summed
  and the sum is L2-normalized.

The per-layer vectors are concatenated in ascending layer order, projected
through a PCA-whitening model, and L2-normalized into the final descriptor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import (
    DegenerateInputError,
    DimensionMismatchError,
    InsufficientDataError,
    MalformedInputError,
)

NORM_EPS = 1e-12

POOL_MODES = ("imac", "l3-irmac")


@dataclass
class FeatureMapStack:
    """Per-frame stack of activation grids, one (h, w, c) array per layer."""

    layers: list[np.ndarray]
    frame_index: int = 0


def _layer_grids(maps) -> list[np.ndarray]:
    layers = maps.layers if isinstance(maps, FeatureMapStack) else list(maps)
    if len(layers) == 0:
        raise MalformedInputError("feature map stack has no layers")
    grids = []
    for k, layer in enumerate(layers):
        grid = np.asarray(layer, dtype=np.float64)
        if grid.ndim != 3 or min(grid.shape) < 1:
            raise MalformedInputError(
                f"layer {k} must be a non-empty (h, w, c) grid, got shape {grid.shape}"
            )
        if not np.all(np.isfinite(grid)):
            raise MalformedInputError(f"layer {k} contains non-finite values")
        grids.append(grid)
    return grids


def l2_normalize(v: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Return v / ||v||, raising if the norm is below ``eps``."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= eps:
        raise DegenerateInputError(f"cannot normalize vector with norm {norm:.3g}")
    return v / norm


def imac_pool(maps) -> list[np.ndarray]:
    """Per layer, the maximum activation of every channel over all positions."""
    return [grid.max(axis=(0, 1)) for grid in _layer_grids(maps)]


def _band_bounds(n: int) -> list[tuple[int, int]]:
    # Three contiguous bands covering [0, n); boundaries at ceil(i*n/3) so no
    # band is empty for any n >= 3.
    cuts = [int(np.ceil(i * n / 3)) for i in range(4)]
    return [(cuts[i], cuts[i + 1]) for i in range(3)]


def l3_irmac_pool(maps) -> list[np.ndarray]:
    """Regional 3x3 max pooling per layer, summed and L2-normalized."""
    out = []
    for k, grid in enumerate(_layer_grids(maps)):
        h, w, c = grid.shape
        if h < 3 or w < 3:
            raise MalformedInputError(
                f"layer {k} grid is {h}x{w}; regional pooling needs at least 3x3"
            )
        total = np.zeros(c)
        for r0, r1 in _band_bounds(h):
            for c0, c1 in _band_bounds(w):
                total += grid[r0:r1, c0:c1].max(axis=(0, 1))
        try:
            out.append(l2_normalize(total))
        except DegenerateInputError:
            raise DegenerateInputError(
                f"layer {k} regional sum is zero; cannot normalize"
            ) from None
    return out


def pool_stack(maps, mode: str) -> np.ndarray:
    """Pool every layer per ``mode`` and concatenate in ascending layer order."""
    if mode == "imac":
        vectors = imac_pool(maps)
    elif mode == "l3-irmac":
        vectors = l3_irmac_pool(maps)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}; expected one of {POOL_MODES}")
    return np.concatenate(vectors)


class DescriptorWhitener(TransformerMixin, BaseEstimator):
    """PCA whitening with dimensionality reduction, sklearn-style.

    ``fit`` learns the sample mean and the projection onto the top
    ``output_dim`` principal axes scaled to unit variance; ``transform``
    centers and projects. Eigenvalues below ``floor_ratio`` times the
    largest eigenvalue are clamped before the inverse-sqrt scaling so that
    rank-deficient samples do not blow up.

    Parameters
    ----------
    output_dim : target dimensionality (must not exceed the input dimension).
    floor_ratio : relative eigenvalue floor, default 1e-10.
    """

    def __init__(self, output_dim: int = 1024, floor_ratio: float = 1e-10):
        self.output_dim = output_dim
        self.floor_ratio = floor_ratio

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise MalformedInputError(f"expected 2-D sample matrix, got {X.shape}")
        n, d_in = X.shape
        if self.output_dim > d_in:
            raise DimensionMismatchError(
                f"output_dim {self.output_dim} exceeds input dimension {d_in}"
            )
        if n <= self.output_dim:
            raise InsufficientDataError(
                f"need more than {self.output_dim} samples to whiten, got {n}"
            )
        if not np.all(np.isfinite(X)):
            raise MalformedInputError("whitening samples contain non-finite values")
        mean = X.mean(axis=0)
        centered = X - mean
        cov = centered.T @ centered / (n - 1)
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1][: self.output_dim]
        eigvals = eigvals[order]
        eigvecs = eigvecs[:, order]
        if eigvals[0] <= 0.0:
            raise DegenerateInputError("covariance has no positive eigenvalues")
        floored = np.maximum(eigvals, self.floor_ratio * eigvals[0])
        self.mean_ = mean
        self.eigenvalues_ = eigvals
        self.projection_ = eigvecs / np.sqrt(floored)
        self.input_dim_ = d_in
        self.output_dim_ = int(self.output_dim)
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "projection_"):
            raise RuntimeError("DescriptorWhitener is not fitted")
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.shape[1] != self.input_dim_:
            raise DimensionMismatchError(
                f"input dimension {X.shape[1]} does not match model ({self.input_dim_})"
            )
        out = (X - self.mean_) @ self.projection_
        return out[0] if single else out

    @classmethod
    def from_arrays(cls, mean: np.ndarray, projection: np.ndarray) -> "DescriptorWhitener":
        """Build a fitted whitener directly from its parameters (e.g. from disk)."""
        mean = np.asarray(mean, dtype=np.float64)
        projection = np.asarray(projection, dtype=np.float64)
        if mean.ndim != 1 or projection.ndim != 2 or projection.shape[0] != mean.shape[0]:
            raise MalformedInputError("inconsistent whitening parameter shapes")
        model = cls(output_dim=projection.shape[1])
        model.mean_ = mean
        model.projection_ = projection
        model.input_dim_ = mean.shape[0]
        model.output_dim_ = projection.shape[1]
        return model


def fit_whitening(samples: Sequence[np.ndarray] | np.ndarray, output_dim: int) -> DescriptorWhitener:
    """Fit a whitening model on a stack of concatenated pooled descriptors."""
    X = np.asarray(samples, dtype=np.float64)
    return DescriptorWhitener(output_dim=output_dim).fit(X)


def frame_descriptor(maps, mode: str, model: DescriptorWhitener) -> np.ndarray:
    """Pool, concatenate, whiten, and L2-normalize one frame's feature maps."""
    pooled = pool_stack(maps, mode)
    if pooled.shape[0] != model.input_dim_:
        raise DimensionMismatchError(
            f"pooled dimension {pooled.shape[0]} does not match whitening input "
            f"dimension {model.input_dim_}"
        )
    return l2_normalize(model.transform(pooled))


def frame_descriptor_sequence(stacks: Sequence, mode: str, model: DescriptorWhitener) -> np.ndarray:
    """Descriptor rows for a whole video, one row per frame stack."""
    rows = [frame_descriptor(stack, mode, model) for stack in stacks]
    if not rows:
        raise MalformedInputError("video has no frames")
    return np.stack(rows)
