"""Concordance, spatial autocorrelation and attention summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    """The metric has no defined value for this input."""


def c_index(risks: Sequence[float], times: Sequence[float], censored: Sequence[int]) -> float:
    """Concordance index for survival scores.

    A pair (i, j) with ``t_i < t_j`` is comparable when sample i had an
    event.  It is concordant when ``risk_i < risk_j`` (the score predicts
    survival, so the earlier failure should score lower); risk ties count
    one half.
    """
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    c = np.asarray(censored)
    if not (len(r) == len(t) == len(c)):
        raise ValueError("risks, times and censored must have equal length")
    if len(r) < 2:
        raise UndefinedMetricError("c_index needs at least two samples")
    comparable = (t[:, None] < t[None, :]) & (c[:, None] == 0)
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise UndefinedMetricError("no comparable pairs")
    concordant = (r[:, None] < r[None, :]) & comparable
    tied = (r[:, None] == r[None, :]) & comparable
    return (int(concordant.sum()) + 0.5 * int(tied.sum())) / n_pairs


@dataclass
class HeatmapGrid:
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise ValueError(f"values {self.values.shape} and mask {self.mask.shape} must be equal 2-d shapes")

    @classmethod
    def from_patches(cls, values: Sequence[float], coords: np.ndarray, shape: tuple[int, int] | None = None,
                     fill: float = 0.0) -> "HeatmapGrid":
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        if shape is None:
            shape = (int(coords[:, 0].max()) + 1, int(coords[:, 1].max()) + 1) if len(coords) else (0, 0)
        grid = np.full(shape, fill, dtype=np.float64)
        mask = np.zeros(shape, dtype=bool)
        grid[coords[:, 0], coords[:, 1]] = np.asarray(values, dtype=np.float64)
        mask[coords[:, 0], coords[:, 1]] = True
        return cls(grid, mask)


def morans_i(grid: HeatmapGrid | np.ndarray, mask: np.ndarray | None = None) -> float:
    """Moran's I with rook (4-neighbour) binary weights over unmasked cells."""
    if not isinstance(grid, HeatmapGrid):
        values = np.asarray(grid, dtype=np.float64)
        grid = HeatmapGrid(values, np.ones(values.shape, dtype=bool) if mask is None else mask)
    x, m = grid.values, grid.mask
    n = int(m.sum())
    if n < 2:
        raise UndefinedMetricError("Moran's I needs at least two foreground cells")
    z = np.where(m, x - x[m].mean(), 0.0)
    denom = float((z[m] ** 2).sum())
    if denom == 0.0:
        raise UndefinedMetricError("zero variance")
    # each unordered neighbour pair appears twice in the double sum
    horiz = m[:, :-1] & m[:, 1:]
    vert = m[:-1, :] & m[1:, :]
    w_sum = 2 * (int(horiz.sum()) + int(vert.sum()))
    if w_sum == 0:
        raise UndefinedMetricError("no adjacent foreground cells")
    cross = 2 * (float((z[:, :-1] * z[:, 1:])[horiz].sum()) + float((z[:-1, :] * z[1:, :])[vert].sum()))
    return n * cross / (w_sum * denom)


def zscore(matrix: np.ndarray) -> np.ndarray:
    """Standardise over all entries; a constant matrix maps to zeros."""
    matrix = np.asarray(matrix, dtype=np.float64)
    sd = matrix.std()
    if sd == 0:
        return np.zeros_like(matrix)
    return (matrix - matrix.mean()) / sd


def top_patch_indices(a: np.ndarray, frac: float = 0.10) -> np.ndarray:
    """Indices of the ``ceil(frac * K)`` largest patch weights (stable order on ties)."""
    a = np.asarray(a)
    n = max(1, math.ceil(frac * len(a) - 1e-12))
    return np.argsort(-a, kind="stable")[:n]


def avg_marker_attention(A_list: Sequence[np.ndarray], a_list: Sequence[np.ndarray], frac: float = 0.10,
                         standardize: bool = False) -> np.ndarray:
    """Cohort-average marker attention over each slide's most attended patches."""
    if len(A_list) != len(a_list) or not A_list:
        raise ValueError("need one patch-attention vector per slide and at least one slide")
    per_slide = []
    for A, a in zip(A_list, a_list):
        A, a = np.asarray(A, dtype=np.float64), np.asarray(a, dtype=np.float64)
        if A.shape[0] != a.shape[0]:
            raise ValueError(f"{A.shape[0]} attention matrices for {a.shape[0]} patch weights")
        per_slide.append(A[top_patch_indices(a, frac)].mean(axis=0))
    avg = np.mean(per_slide, axis=0)
    return zscore(avg) if standardize else avg


def argmax_marker(A: np.ndarray) -> np.ndarray:
    """Marker receiving the most in-going attention (column sums) per patch; ties go to the lowest index."""
    A = np.asarray(A, dtype=np.float64)
    return np.argmax(A.sum(axis=1), axis=-1)


def argmax_marker_heatmap(A: np.ndarray, coords: np.ndarray, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Place per-patch argmax markers on the patch grid; background cells are -1."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if shape is None:
        shape = (int(coords[:, 0].max()) + 1, int(coords[:, 1].max()) + 1) if len(coords) else (0, 0)
    grid = np.full(shape, -1, dtype=np.int64)
    if len(coords):
        grid[coords[:, 0], coords[:, 1]] = argmax_marker(A)
    return grid
