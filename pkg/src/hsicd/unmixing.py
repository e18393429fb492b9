"""Endmember extraction and constrained abundance estimation.

Two mixing models are supported for a pixel spectrum y given endmember
matrix X (b x m, one column per material):

  linear:    y = X w + noise
  bilinear:  y = X w + sum_{i<j} w_i w_j (x_i * x_j) + noise

with w on the probability simplex (nonnegative, sums to one). Linear
abundances come from fully constrained least squares (sum-to-one enforced by
a weighted augmentation row, solved as nonnegative least squares). Bilinear
abundances come from projected gradient descent on the model residual with
exact Euclidean projection onto the simplex.

Endmembers are picked by the automatic target generation process: greedy
selection of the pixel with the largest residual after orthogonal projection
away from the span of the pixels already chosen.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from numba import njit

from .cube import HyperCube
from .errors import (
    ChangeDetectError,
    ConvergenceError,
    DataError,
    DegeneracyError,
    NumericError,
    ShapeError,
)

_RANK_TOL = 1e-12


@dataclass(frozen=True, slots=True)
class EndmemberSet:
    """Endmember spectra as columns of a b x m matrix."""

    matrix: np.ndarray
    source_indices: tuple[int, ...] | None = None

    def __post_init__(self):
        mat = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[1] < 1:
            raise ShapeError(f"endmember matrix must be b x m, got {mat.shape}")
        if not np.isfinite(mat).all():
            raise DataError("non-finite endmember value")
        for i in range(mat.shape[1]):
            for j in range(i + 1, mat.shape[1]):
                if np.array_equal(mat[:, i], mat[:, j]):
                    raise DataError(f"endmember columns {i} and {j} are identical")
        object.__setattr__(self, "matrix", mat)
        if self.source_indices is not None:
            object.__setattr__(
                self, "source_indices", tuple(int(i) for i in self.source_indices)
            )

    @property
    def bands(self) -> int:
        return self.matrix.shape[0]

    @property
    def count(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True, slots=True)
class AbundanceVector:
    """Per-pixel mixture fractions, nonnegative and summing to one."""

    values: np.ndarray
    kind: str  # "linear" or "nonlinear"

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.size < 1:
            raise ShapeError(f"abundance vector must be 1-D, got shape {vals.shape}")
        if self.kind not in ("linear", "nonlinear"):
            raise DataError(f"unknown abundance kind {self.kind!r}")
        if vals.min() < -1e-6 or vals.max() > 1.0 + 1e-6:
            raise DataError(f"abundance outside [0,1]: {vals}")
        if abs(vals.sum() - 1.0) > 1e-6:
            raise DataError(f"abundances sum to {vals.sum()!r}, expected 1")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True, slots=True)
class AbundanceCube:
    """Per-pixel abundance vectors over a scene, shape (height, width, m)."""

    height: int
    width: int
    m: int
    kind: str
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.shape != (self.height, self.width, self.m):
            raise ShapeError(
                f"abundance data shape {data.shape} != "
                f"({self.height}, {self.width}, {self.m})"
            )
        if self.m < 1:
            raise ShapeError("m must be >= 1")
        if self.kind not in ("linear", "nonlinear"):
            raise DataError(f"unknown abundance kind {self.kind!r}")
        if not np.isfinite(data).all():
            raise DataError("non-finite abundance value")
        if data.min() < -1e-6 or data.max() > 1.0 + 1e-6:
            raise DataError("abundance outside [0,1]")
        if np.abs(data.sum(axis=2) - 1.0).max() > 1e-6:
            raise DataError("abundances do not sum to 1")
        object.__setattr__(self, "data", data)

    def to_cube(self) -> HyperCube:
        """Repackage as an m-band raster for serialization."""
        return HyperCube.from_array(self.data.transpose(2, 0, 1))


def atgp(pixels: np.ndarray, m: int) -> EndmemberSet:
    """Greedy orthogonal-projection endmember extraction.

    The first pick is the pixel of maximum Euclidean norm; each later pick
    maximizes the residual norm after projection onto the orthogonal
    complement of the span of the picks so far. Ties break toward the lowest
    pixel index (argmax semantics).

    Args:
        pixels: (N, b) array, one spectrum per row.
        m: number of endmembers to extract.

    Raises:
        DegeneracyError: all residuals fall below 1e-12 before m picks.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2:
        raise ShapeError(f"pixels must be (N, b), got {pixels.shape}")
    n_px, b = pixels.shape
    if m < 1:
        raise ShapeError("m must be >= 1")
    if m > b:
        raise ShapeError(f"m={m} exceeds band count {b}")
    if m > n_px:
        raise ShapeError(f"m={m} exceeds pixel count {n_px}")

    chosen: list[int] = []
    # orthonormal basis of the span of chosen pixels, built incrementally
    basis = np.zeros((b, 0))
    residual = pixels.copy()
    for _ in range(m):
        norms = np.linalg.norm(residual, axis=1)
        best = int(np.argmax(norms))
        if norms[best] < _RANK_TOL:
            raise DegeneracyError(
                f"rank collapse: only {len(chosen)} of {m} endmembers found"
            )
        chosen.append(best)
        v = pixels[best] - basis @ (basis.T @ pixels[best])
        nv = np.linalg.norm(v)
        if nv < _RANK_TOL:
            raise DegeneracyError(
                f"rank collapse: only {len(chosen) - 1} of {m} endmembers found"
            )
        basis = np.column_stack([basis, v / nv])
        residual = pixels - (pixels @ basis) @ basis.T
    return EndmemberSet(
        matrix=pixels[chosen].T, source_indices=tuple(chosen)
    )


def nnls(A: np.ndarray, y: np.ndarray, max_iters: int | None = None) -> np.ndarray:
    """Nonnegative least squares by the Lawson-Hanson active-set method.

    Returns x >= 0 minimizing ||A x - y||_2. The returned solution satisfies
    the KKT conditions to within 1e-8 relative to ||y||.

    Args:
        max_iters: outer-iteration cap; defaults to 3 * q.

    Raises:
        ConvergenceError: cap exceeded; `.best` holds the best feasible
            iterate found.
    """
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if A.ndim != 2 or A.shape[0] != y.size:
        raise ShapeError(f"A {A.shape} incompatible with y ({y.size},)")
    q = A.shape[1]
    if max_iters is None:
        max_iters = 3 * q
    tol = 1e-10 * max(1.0, float(np.abs(A.T @ y).max()))

    x = np.zeros(q)
    passive = np.zeros(q, dtype=bool)
    best_x = x.copy()
    best_res = float(np.linalg.norm(y))
    w = A.T @ y
    iters = 0
    while True:
        inactive = ~passive
        if not inactive.any() or w[inactive].max() <= tol:
            return x
        if iters >= max_iters:
            raise ConvergenceError(
                f"nnls: iteration cap {max_iters} exceeded", best=best_x
            )
        iters += 1
        j = int(np.flatnonzero(inactive)[np.argmax(w[inactive])])
        passive[j] = True
        # inner loop: solve on the passive set, walk back if infeasible
        while True:
            cols = np.flatnonzero(passive)
            z = np.zeros(q)
            z[cols] = np.linalg.lstsq(A[:, cols], y, rcond=None)[0]
            if z[cols].min() > 0:
                x = z
                break
            mask = passive & (z <= 0)
            alpha = np.min(x[mask] / (x[mask] - z[mask]))
            x = x + alpha * (z - x)
            passive &= x > 0
            x[~passive] = 0.0
            if not passive.any():
                x = np.zeros(q)
                break
        res = float(np.linalg.norm(A @ x - y))
        if res < best_res:
            best_res = res
            best_x = x.copy()
        w = A.T @ (y - A @ x)
    # unreachable


def fcls(
    endmembers: EndmemberSet, pixel: np.ndarray, delta: float = 1e-3
) -> AbundanceVector:
    """Fully constrained (nonnegative, sum-to-one) linear abundances.

    The sum constraint is enforced by solving the augmented system whose data
    rows are scaled by `delta` and whose extra row of ones targets 1, then
    renormalizing the nonnegative solution to an exact unit sum.
    """
    pixel = np.asarray(pixel, dtype=np.float64).ravel()
    X = endmembers.matrix
    if pixel.size != X.shape[0]:
        raise ShapeError(f"pixel length {pixel.size} != band count {X.shape[0]}")
    m = X.shape[1]
    A = np.empty((X.shape[0] + 1, m))
    A[:-1] = delta * X
    A[-1] = 1.0
    b = np.empty(X.shape[0] + 1)
    b[:-1] = delta * pixel
    b[-1] = 1.0
    x = nnls(A, b)
    s = x.sum()
    if s <= 0.0:
        raise DegeneracyError("fcls produced the all-zero abundance vector")
    return AbundanceVector(values=x / s, kind="linear")


# ---------------------------------------------------------------------------
# bilinear model
# ---------------------------------------------------------------------------

def _pair_indices(m: int) -> tuple[np.ndarray, np.ndarray]:
    iu = np.triu_indices(m, k=1)
    return iu[0].astype(np.int64), iu[1].astype(np.int64)


def _cross_products(X: np.ndarray) -> np.ndarray:
    """Rows x_i * x_j (elementwise) for all pairs i < j, shape (P, b)."""
    pi, pj = _pair_indices(X.shape[1])
    return np.ascontiguousarray((X[:, pi] * X[:, pj]).T)


@njit(cache=True)
def _simplex_project(v):
    """Euclidean projection onto {w : w >= 0, sum w = 1} (sort method)."""
    m = v.size
    u = np.sort(v)[::-1]
    css = 0.0
    rho = -1
    theta = 0.0
    for j in range(m):
        css += u[j]
        t = (css - 1.0) / (j + 1)
        if u[j] - t > 0.0:
            rho = j
            theta = t
    w = v - theta
    for i in range(m):
        if w[i] < 0.0:
            w[i] = 0.0
    return w


@njit(cache=True)
def _bfm_f(X, C, pi, pj, w):
    """Model forward: X w + sum_{i<j} w_i w_j C[pair]; C holds pair rows."""
    out = X @ w
    for p in range(pi.size):
        a = w[pi[p]] * w[pj[p]]
        if a != 0.0:
            out += a * C[p]
    return out


@njit(cache=True)
def _bfm_core(X, C, pi, pj, y, w0, max_iters, rel_tol):
    """Projected gradient descent on ||f(w) - y||, backtracking from step 1.

    Returns (w, status, iters) with status 0 = stopped/converged,
    1 = non-finite residual at iteration `iters`.
    """
    w = _simplex_project(w0.copy())
    r = _bfm_f(X, C, pi, pj, w) - y
    res = np.sqrt((r * r).sum())
    if not np.isfinite(res):
        return w, 1, 0
    for it in range(max_iters):
        # gradient of the squared residual: 2 J^T r with
        # J[:,k] = x_k + sum_{pairs containing k} w_other * cross-column
        g = 2.0 * (X.T @ r)
        for p in range(pi.size):
            cr = 2.0 * (C[p] @ r)
            g[pi[p]] += w[pj[p]] * cr
            g[pj[p]] += w[pi[p]] * cr
        step = 1.0
        improved = False
        rel_gain = 0.0
        while step > 1e-20:
            cand = _simplex_project(w - step * g)
            rc = _bfm_f(X, C, pi, pj, cand) - y
            resc = np.sqrt((rc * rc).sum())
            if not np.isfinite(resc):
                return w, 1, it + 1
            if resc < res:
                rel_gain = (res - resc) / max(res, 1e-300)
                w = cand
                r = rc
                res = resc
                improved = True
                break
            step *= 0.5
        if not improved:
            return w, 0, it + 1
        if rel_gain < rel_tol:
            return w, 0, it + 1
    return w, 0, max_iters


def _as_values(w) -> np.ndarray:
    return np.asarray(getattr(w, "values", w), dtype=np.float64).ravel()


def bfm_forward(endmembers: EndmemberSet, w) -> np.ndarray:
    """Evaluate the bilinear mixing model at abundances w."""
    X = endmembers.matrix
    wv = _as_values(w)
    if wv.size != X.shape[1]:
        raise ShapeError(f"got {wv.size} abundances for {X.shape[1]} endmembers")
    pi, pj = _pair_indices(X.shape[1])
    return _bfm_f(X, _cross_products(X), pi, pj, wv)


def bfm_unmix(
    endmembers: EndmemberSet,
    pixel: np.ndarray,
    init: AbundanceVector | None = None,
    max_iters: int = 500,
) -> AbundanceVector:
    """Bilinear-model abundances by projected gradient descent.

    Starts from `init` (default: the linear FCLS solution) and descends the
    model residual with backtracking line search (halving from step 1.0) and
    exact simplex projection after every step. Stops when the relative
    residual improvement drops below 1e-8 or `max_iters` is reached. The
    residual never increases across accepted steps.

    Raises:
        NumericError: residual became non-finite.
    """
    pixel = np.asarray(pixel, dtype=np.float64).ravel()
    X = endmembers.matrix
    if pixel.size != X.shape[0]:
        raise ShapeError(f"pixel length {pixel.size} != band count {X.shape[0]}")
    if init is None:
        init = fcls(endmembers, pixel)
    w0 = _as_values(init)
    if w0.size != X.shape[1]:
        raise ShapeError(f"init length {w0.size} != endmember count {X.shape[1]}")
    pi, pj = _pair_indices(X.shape[1])
    w, status, iters = _bfm_core(
        X, _cross_products(X), pi, pj, pixel, w0, max_iters, 1e-8
    )
    if status == 1:
        raise NumericError(f"non-finite residual at iterate {iters}")
    return AbundanceVector(values=w, kind="nonlinear")


# ---------------------------------------------------------------------------
# cube-level application
# ---------------------------------------------------------------------------

_MAX_PIXEL_FAILURES = 100


def fcls_cube(
    endmembers: EndmemberSet, cube: HyperCube, delta: float = 1e-3
) -> AbundanceCube:
    """Linear abundances for every pixel of a cube.

    Pixels whose unconstrained sum-to-one solution is already nonnegative
    (the common case) are solved in one vectorized pass; the rest fall back
    to the per-pixel active-set path. Both routes satisfy the same KKT
    conditions.
    """
    X = endmembers.matrix
    if cube.bands != X.shape[0]:
        raise ShapeError(f"cube has {cube.bands} bands, endmembers {X.shape[0]}")
    m = X.shape[1]
    h, w = cube.height, cube.width
    spectra = cube.data.reshape(cube.bands, h * w).T.astype(np.float64)

    # normal equations of the delta-augmented system, shared by all pixels
    G = (delta * delta) * (X.T @ X) + 1.0
    rhs = (delta * delta) * (spectra @ X) + 1.0
    try:
        cand = np.linalg.solve(G, rhs.T).T
    except np.linalg.LinAlgError:
        cand = np.full((h * w, m), -1.0)
    ok = (cand.min(axis=1) >= 0.0) & np.isfinite(cand).all(axis=1)
    vals = np.zeros((h * w, m))
    vals[ok] = cand[ok]

    failures: list[str] = []
    for idx in np.flatnonzero(~ok):
        try:
            vals[idx] = fcls(endmembers, spectra[idx], delta).values
        except ChangeDetectError as exc:
            failures.append(f"({idx // w},{idx % w}): {exc}")
            if len(failures) >= _MAX_PIXEL_FAILURES:
                break
    if failures:
        raise DegeneracyError(
            f"{len(failures)} pixel(s) failed to unmix; first entries: "
            + "; ".join(failures[:5])
        )
    sums = vals.sum(axis=1)
    if (sums <= 0).any():
        raise DegeneracyError("all-zero abundance vector in cube solve")
    vals /= sums[:, None]
    return AbundanceCube(
        height=h, width=w, m=m, kind="linear", data=vals.reshape(h, w, m)
    )


def bfm_cube(
    endmembers: EndmemberSet,
    cube: HyperCube,
    max_iters: int = 500,
    init: AbundanceCube | None = None,
) -> AbundanceCube:
    """Bilinear abundances for every pixel of a cube.

    When `init` is omitted the linear solution (fcls_cube) seeds the descent,
    mirroring the per-pixel default.
    """
    X = endmembers.matrix
    if cube.bands != X.shape[0]:
        raise ShapeError(f"cube has {cube.bands} bands, endmembers {X.shape[0]}")
    m = X.shape[1]
    h, w = cube.height, cube.width
    if init is None:
        init = fcls_cube(endmembers, cube)
    if init.m != m or (init.height, init.width) != (h, w):
        raise ShapeError("init abundance cube incongruent with inputs")
    spectra = cube.data.reshape(cube.bands, h * w).T.astype(np.float64)
    w0 = init.data.reshape(h * w, m)
    pi, pj = _pair_indices(m)
    C = _cross_products(X)
    vals = np.empty((h * w, m))
    failures: list[str] = []
    for idx in range(h * w):
        wout, status, iters = _bfm_core(
            X, C, pi, pj, spectra[idx], w0[idx].copy(), max_iters, 1e-8
        )
        if status == 1:
            failures.append(f"({idx // w},{idx % w}): non-finite at iter {iters}")
            if len(failures) >= _MAX_PIXEL_FAILURES:
                break
            continue
        vals[idx] = wout
    if failures:
        raise NumericError(
            f"{len(failures)} pixel(s) failed to unmix; first entries: "
            + "; ".join(failures[:5])
        )
    return AbundanceCube(
        height=h, width=w, m=m, kind="nonlinear", data=vals.reshape(h, w, m)
    )


def save_endmembers(endmembers: EndmemberSet, path: str) -> None:
    """Write the endmember matrix as text: b rows, m space-separated columns."""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    np.savetxt(path, endmembers.matrix, fmt="%.17g")


def load_endmembers(path: str) -> EndmemberSet:
    mat = np.loadtxt(path, dtype=np.float64)
    if mat.ndim == 1:
        mat = mat[:, None]
    return EndmemberSet(matrix=mat)
