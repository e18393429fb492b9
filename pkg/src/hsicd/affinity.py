"""Stacked multi-source pixel vectors and per-pixel mixed-affinity matrices.

Each pixel contributes an n-vector (n = b + 2m): its b spectral bands, then m
linear abundances, then m nonlinear abundances. The affinity matrix of a
pixel compares every component of its time-1 vector against every component
of its time-2 vector:

    K[i][j] = 1 - (p1[i] - p2[j]) / p2[j]

with the denominator floored at +/-eps (sign of 0 counts as +) so entries
stay finite when abundances are legitimately zero.

The n x n grid splits into five regions by which segments i and j fall in:

    A  spectral x spectral          (i < b, j < b)
    B  linear x linear abundance    (both in [b, b+m))
    E  nonlinear x nonlinear        (both in [b+m, n))
    D  linear x nonlinear, either order
    C  spectral x abundance cross blocks, forced to exactly 0

Cross-source ratios (region C) mix incomparable quantities, which is why the
region is hard-zeroed rather than computed.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .cube import HyperCube
from .errors import DataError, ShapeError
from .unmixing import AbundanceCube

DEFAULT_EPS = 1e-6


@dataclass(frozen=True, slots=True)
class RegionLayout:
    """Region geometry of an n x n affinity matrix for given (b, m)."""

    b: int
    m: int

    def __post_init__(self):
        if self.b < 1 or self.m < 1:
            raise ShapeError(f"need b >= 1 and m >= 1, got b={self.b} m={self.m}")

    @property
    def n(self) -> int:
        return self.b + 2 * self.m

    def region_of(self, i: int, j: int) -> str:
        """Classify index pair (i, j) into one of A, B, C, D, E."""
        n = self.n
        if not (0 <= i < n and 0 <= j < n):
            raise ShapeError(f"index ({i},{j}) outside [0,{n})^2")
        ri, rj = i < self.b, j < self.b
        if ri and rj:
            return "A"
        if ri != rj:
            return "C"
        si, sj = i - self.b < self.m, j - self.b < self.m
        if si and sj:
            return "B"
        if not si and not sj:
            return "E"
        return "D"

    def region_masks(self) -> dict[str, np.ndarray]:
        """Boolean (n, n) mask per region; the five masks partition the grid."""
        return {k: v.copy() for k, v in _masks_for(self.b, self.m).items()}


@lru_cache(maxsize=32)
def _masks_for(b: int, m: int) -> dict[str, np.ndarray]:
    n = b + 2 * m
    spec = np.arange(n) < b
    lin = (np.arange(n) >= b) & (np.arange(n) < b + m)
    non = np.arange(n) >= b + m
    masks = {
        "A": np.outer(spec, spec),
        "B": np.outer(lin, lin),
        "C": np.outer(spec, ~spec) | np.outer(~spec, spec),
        "D": np.outer(lin, non) | np.outer(non, lin),
        "E": np.outer(non, non),
    }
    for v in masks.values():
        v.flags.writeable = False
    return masks


@dataclass(frozen=True, slots=True)
class MixedAffinityMatrix:
    """One pixel's n x n cross-date affinity matrix."""

    values: np.ndarray
    layout: RegionLayout

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float32)
        n = self.layout.n
        if vals.shape != (n, n):
            raise ShapeError(f"affinity shape {vals.shape} != ({n}, {n})")
        if not np.isfinite(vals).all():
            raise DataError("non-finite affinity entry")
        if vals[_masks_for(self.layout.b, self.layout.m)["C"]].any():
            raise DataError("nonzero entry in region C")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True, slots=True)
class StackedCube:
    """Per-pixel stacked vectors [spectra | linear | nonlinear], (h, w, n)."""

    height: int
    width: int
    b: int
    m: int
    data: np.ndarray

    def __post_init__(self):
        n = self.b + 2 * self.m
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.shape != (self.height, self.width, n):
            raise ShapeError(
                f"stacked data shape {data.shape} != "
                f"({self.height}, {self.width}, {n})"
            )
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return self.b + 2 * self.m

    def vectors(self) -> np.ndarray:
        """Pixel-major (height*width, n) view of the stacked vectors."""
        return self.data.reshape(-1, self.n)


def stack_sources(
    cube: HyperCube, lin: AbundanceCube, nonlin: AbundanceCube
) -> StackedCube:
    """Concatenate spectra, linear, and nonlinear abundances per pixel."""
    if (lin.height, lin.width) != (cube.height, cube.width) or (
        nonlin.height,
        nonlin.width,
    ) != (cube.height, cube.width):
        raise ShapeError("spatial dims differ between cube and abundance inputs")
    if lin.kind != "linear":
        raise ShapeError(f"first abundance cube has kind {lin.kind!r}, want linear")
    if nonlin.kind != "nonlinear":
        raise ShapeError(
            f"second abundance cube has kind {nonlin.kind!r}, want nonlinear"
        )
    if lin.m != nonlin.m:
        raise ShapeError(f"endmember counts differ: {lin.m} vs {nonlin.m}")
    stacked = np.concatenate(
        [cube.data.transpose(1, 2, 0), lin.data, nonlin.data], axis=2
    )
    return StackedCube(
        height=cube.height, width=cube.width, b=cube.bands, m=lin.m, data=stacked
    )


def _affinity_block(
    p1: np.ndarray, p2: np.ndarray, layout: RegionLayout, eps: float
) -> np.ndarray:
    """Affinity matrices for row-aligned vector batches, shape (B, n, n).

    Single code path for the one-pixel op and all batch users, so batch
    output is bitwise identical to a per-pixel loop.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    sign = np.where(p2 < 0.0, -1.0, 1.0)
    d = np.where(np.abs(p2) >= eps, p2, eps * sign)
    k = 1.0 - (p1[:, :, None] - p2[:, None, :]) / d[:, None, :]
    k[:, _masks_for(layout.b, layout.m)["C"]] = 0.0
    return k.astype(np.float32)


def mixed_affinity(
    p1: np.ndarray, p2: np.ndarray, layout: RegionLayout, eps: float = DEFAULT_EPS
) -> MixedAffinityMatrix:
    """Affinity matrix for one pixel's stacked vectors at the two dates."""
    p1 = np.asarray(p1, dtype=np.float64).ravel()
    p2 = np.asarray(p2, dtype=np.float64).ravel()
    n = layout.n
    if p1.size != n or p2.size != n:
        raise ShapeError(f"vector lengths ({p1.size}, {p2.size}) != layout n={n}")
    if not (np.isfinite(p1).all() and np.isfinite(p2).all()):
        raise DataError("non-finite stacked vector entry")
    values = _affinity_block(p1[None], p2[None], layout, eps)[0]
    return MixedAffinityMatrix(values=values, layout=layout)


def affinity_batch(
    s1: StackedCube,
    s2: StackedCube,
    pixel_indices,
    eps: float = DEFAULT_EPS,
) -> np.ndarray:
    """Raw (S, n, n) float32 affinity stack for the listed flat pixel indices.

    This is the bulk form that feeds training and inference; it shares
    its code path with mixed_affinity, so stacking per-pixel results is
    bitwise identical.
    """
    if (s1.height, s1.width, s1.b, s1.m) != (s2.height, s2.width, s2.b, s2.m):
        raise ShapeError("stacked cubes are incongruent")
    layout = RegionLayout(b=s1.b, m=s1.m)
    idx = np.asarray(list(pixel_indices), dtype=np.int64)
    if idx.size == 0:
        return np.empty((0, layout.n, layout.n), dtype=np.float32)
    total = s1.height * s1.width
    if idx.min() < 0 or idx.max() >= total:
        raise DataError(f"pixel index out of range 0..{total - 1}")
    return _affinity_block(s1.vectors()[idx], s2.vectors()[idx], layout, eps)
