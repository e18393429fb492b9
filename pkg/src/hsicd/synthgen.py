"""Synthetic two-date hyperspectral scenes with exact ground truth.

Endmember spectra are sums of 2-4 Gaussian bumps over the band index,
peak-normalized and kept at least 30 degrees of spectral angle apart.
Time-1 abundances come from spatially smooth Gaussian random fields
projected onto the probability simplex pixel by pixel. A seeded set of
elliptical blobs marks the changed area: inside it, every time-2 abundance
vector converts to the scene's rarest endmember (one shared interior-pure
target, the way a flood or burn replaces whatever was there with a single
material). Spectra mix linearly or bilinearly, and white Gaussian noise is
added to hit the requested SNR.

Everything derives from the single config seed: endmember extraction uses
it directly, the remaining draws use a fixed offset stream, so scenes are
bit-reproducible and `gen_endmembers(m, b, seed)` standalone matches the
scene's endmembers.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .cube import BinaryMap, CubePair, HyperCube, write_envi, write_map
from .errors import ConvergenceError, DataError, DegeneracyError, ShapeError
from .unmixing import AbundanceCube, EndmemberSet, _cross_products, _pair_indices

# wider angles keep the endmember matrix well conditioned, so per-pixel
# abundance estimates do not amplify the band noise
_MIN_ANGLE_DEG = 30.0
_ANGLE_ATTEMPTS = 100
_BLOB_ATTEMPTS = 1000
_FRACTION_TOL = 0.03
# smooth-field shaping: blur radius as a fraction of the scene size, and a
# gain applied before simplex projection (higher gain -> sparser mixtures)
_FIELD_SIGMA_FRAC = 0.15
_FIELD_GAIN = 0.35
# every pixel keeps at least _INTERIOR_PULL/m of each endmember: estimated
# abundances then stay clear of zero at sane noise levels, which keeps the
# downstream ratio affinities away from their denominator floor
_INTERIOR_PULL = 0.50
# each endmember also gets one small near-pure patch (greedy extraction
# needs simplex vertices present in the scene to recover the hull)
_PURE_PATCH_PULL = 0.04
_PURE_PATCH_SIDE = 2
# pull for the conversion target. Strictly between the patch and interior
# pulls: background rows keep every coordinate >= _INTERIOR_PULL/m and patch
# rows sit at _PURE_PATCH_PULL/m, so no time-1 row can equal the target and
# every truth-marked pixel genuinely changes (field pixels that project onto
# the target's own simplex vertex would otherwise be labeled changed while
# keeping identical spectra)
_CHANGE_PULL = 0.44


@dataclass(frozen=True, slots=True)
class SceneConfig:
    height: int
    width: int
    b: int
    m: int
    mixing: str = "linear"
    snr_db: float = math.inf
    change_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ShapeError(f"scene dims must be >= 1, got {self.height}x{self.width}")
        # a conversion-style change needs a second material to convert to
        if self.m < 2 or self.m > self.b:
            raise ShapeError(f"need 2 <= m <= b, got m={self.m} b={self.b}")
        if self.mixing not in ("linear", "bilinear"):
            raise DataError(f"unknown mixing {self.mixing!r}")
        if not (0 < self.change_fraction < 1):
            raise DataError(f"change_fraction out of (0,1): {self.change_fraction}")
        if math.isnan(self.snr_db) or (
            not math.isinf(self.snr_db) and not math.isfinite(self.snr_db)
        ):
            raise DataError(f"snr_db must be finite or +inf, got {self.snr_db}")


@dataclass(frozen=True, slots=True)
class SceneResult:
    """Generated pair plus every ground truth a test could want."""

    pair: CubePair
    truth: BinaryMap
    abundances1: AbundanceCube
    abundances2: AbundanceCube
    endmembers: EndmemberSet


def _spectral_angle_deg(x: np.ndarray, y: np.ndarray) -> float:
    c = float(x @ y / (np.linalg.norm(x) * np.linalg.norm(y)))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def _bump_spectrum(rng: np.random.Generator, b: int) -> np.ndarray:
    grid = np.linspace(0.0, 1.0, b)
    n_bumps = int(rng.integers(2, 5))
    spec = np.zeros(b)
    for _ in range(n_bumps):
        amp = rng.uniform(0.3, 1.0)
        centre = rng.uniform(0.0, 1.0)
        width = rng.uniform(0.05, 0.25)
        spec += amp * np.exp(-0.5 * ((grid - centre) / width) ** 2)
    return spec / spec.max()


def gen_endmembers(m: int, b: int, seed: int = 0) -> EndmemberSet:
    """m positive bump spectra, pairwise >= 30 degrees apart."""
    if m < 1 or m > b:
        raise ShapeError(f"need 1 <= m <= b, got m={m} b={b}")
    rng = np.random.default_rng(seed)
    cols: list[np.ndarray] = []
    for _ in range(m):
        for attempt in range(_ANGLE_ATTEMPTS):
            cand = _bump_spectrum(rng, b)
            if all(
                _spectral_angle_deg(cand, prev) >= _MIN_ANGLE_DEG for prev in cols
            ):
                cols.append(cand)
                break
        else:
            raise DegeneracyError(
                f"could not place endmember {len(cols) + 1} of {m} with "
                f">= {_MIN_ANGLE_DEG} deg separation in {_ANGLE_ATTEMPTS} attempts"
            )
    return EndmemberSet(matrix=np.column_stack(cols))


def _project_rows_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex."""
    n, m = v.shape
    u = np.sort(v, axis=1)[:, ::-1]
    css = np.cumsum(u, axis=1)
    j = np.arange(1, m + 1)
    cond = u - (css - 1.0) / j > 0
    rho = m - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = (css[np.arange(n), rho] - 1.0) / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


def _smooth_abundances(
    rng: np.random.Generator, h: int, w: int, m: int
) -> np.ndarray:
    sigma = max(1.0, _FIELD_SIGMA_FRAC * max(h, w))
    fields = np.empty((h * w, m))
    for k in range(m):
        f = gaussian_filter(rng.standard_normal((h, w)), sigma=sigma, mode="nearest")
        f = (f - f.mean()) / max(f.std(), 1e-12)
        fields[:, k] = f.ravel()
    base = np.full(m, 1.0 / m)
    w1 = _project_rows_to_simplex(base + _FIELD_GAIN * fields)
    return (1.0 - _INTERIOR_PULL) * w1 + _INTERIOR_PULL / m


def _place_blobs(
    rng: np.random.Generator, h: int, w: int, target: float
) -> np.ndarray:
    """Union of random ellipses covering target +/- 0.03 of the pixels."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.zeros((h, w), dtype=bool)
    total = h * w
    for attempt in range(_BLOB_ATTEMPTS):
        frac = mask.sum() / total
        if frac >= target - _FRACTION_TOL:
            return mask
        deficit_px = max((target - frac) * total, 4.0)
        radius = math.sqrt(deficit_px / math.pi)
        a = radius * rng.uniform(0.5, 1.2)
        bx = radius * rng.uniform(0.5, 1.2)
        theta = rng.uniform(0.0, math.pi)
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        ct, st = math.cos(theta), math.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        ellipse = (u / max(a, 1e-9)) ** 2 + (v / max(bx, 1e-9)) ** 2 <= 1.0
        cand = mask | ellipse
        if cand.sum() / total <= target + _FRACTION_TOL:
            mask = cand
    frac = mask.sum() / total
    if frac >= target - _FRACTION_TOL:
        return mask
    raise ConvergenceError(
        f"change fraction {target} unreachable within {_BLOB_ATTEMPTS} blob "
        f"placements (reached {frac:.4f})"
    )


def _plant_pure_patches(
    rng: np.random.Generator, abund: np.ndarray, h: int, w: int
) -> None:
    """Overwrite one small near-pure patch per endmember, in place."""
    m = abund.shape[1]
    side = min(_PURE_PATCH_SIDE, h, w)
    taken: list[tuple[int, int]] = []
    for k in range(m):
        for _ in range(200):
            r = int(rng.integers(0, h - side + 1))
            c = int(rng.integers(0, w - side + 1))
            if all(abs(r - tr) >= side or abs(c - tc) >= side for tr, tc in taken):
                break
        taken.append((r, c))
        row = np.full(m, _PURE_PATCH_PULL / m)
        row[k] += 1.0 - _PURE_PATCH_PULL
        for dr in range(side):
            for dc in range(side):
                abund[(r + dr) * w + (c + dc)] = row


def _apply_change(w1: np.ndarray, mask_flat: np.ndarray) -> np.ndarray:
    """Convert every changed pixel to the scene's rarest endmember.

    The target is the endmember with the smallest scene-wide mean abundance
    at time 1, pulled toward the interior so its estimates stay off the
    ratio floor. One shared target makes the changed class a single coherent
    conversion rather than a grab bag of per-pixel swaps.
    """
    m = w1.shape[1]
    lo = int(np.argmin(w1.mean(axis=0)))
    row = np.full(m, _CHANGE_PULL / m)
    row[lo] += 1.0 - _CHANGE_PULL
    w2 = w1.copy()
    w2[mask_flat] = row
    return w2


def _mix(abund: np.ndarray, endmembers: EndmemberSet, mixing: str) -> np.ndarray:
    X = endmembers.matrix
    spectra = abund @ X.T
    if mixing == "bilinear":
        pi, pj = _pair_indices(X.shape[1])
        spectra = spectra + (abund[:, pi] * abund[:, pj]) @ _cross_products(X)
    return spectra


def _add_noise(
    rng: np.random.Generator, spectra: np.ndarray, snr_db: float
) -> np.ndarray:
    if math.isinf(snr_db):
        return spectra
    power = float((spectra ** 2).mean())
    sigma = math.sqrt(power / (10.0 ** (snr_db / 10.0)))
    return spectra + rng.normal(0.0, sigma, size=spectra.shape)


def gen_scene(config: SceneConfig) -> SceneResult:
    """Generate the pair, ground-truth map, and true abundances."""
    h, w, m = config.height, config.width, config.m
    endmembers = gen_endmembers(m, config.b, config.seed)
    rng = np.random.default_rng(config.seed + 101)

    w1 = _smooth_abundances(rng, h, w, m)
    _plant_pure_patches(rng, w1, h, w)
    mask = _place_blobs(rng, h, w, config.change_fraction)
    w2 = _apply_change(w1, mask.ravel())

    cubes = []
    for abund in (w1, w2):
        spectra = _add_noise(rng, _mix(abund, endmembers, config.mixing), config.snr_db)
        cubes.append(
            HyperCube.from_array(
                spectra.T.reshape(config.b, h, w).astype(np.float32)
            )
        )
    kind = "linear" if config.mixing == "linear" else "nonlinear"
    return SceneResult(
        pair=CubePair(time1=cubes[0], time2=cubes[1]),
        truth=BinaryMap.from_array(mask.astype(np.uint8)),
        abundances1=AbundanceCube(
            height=h, width=w, m=m, kind=kind, data=w1.reshape(h, w, m)
        ),
        abundances2=AbundanceCube(
            height=h, width=w, m=m, kind=kind, data=w2.reshape(h, w, m)
        ),
        endmembers=endmembers,
    )


def save_scene(result: SceneResult, config: SceneConfig, outdir: str) -> dict:
    """Write the pair, truth map, and a text sidecar; returns the paths."""
    os.makedirs(outdir, exist_ok=True)
    base1 = os.path.join(outdir, "time1")
    base2 = os.path.join(outdir, "time2")
    # keys hold the header paths, ready to feed back into the reader
    paths = {
        "time1": base1 + ".hdr",
        "time2": base2 + ".hdr",
        "truth": os.path.join(outdir, "truth.pgm"),
        "sidecar": os.path.join(outdir, "scene.txt"),
    }
    write_envi(result.pair.time1, base1)
    write_envi(result.pair.time2, base2)
    write_map(result.truth, paths["truth"])
    with open(paths["sidecar"], "w") as fh:
        fh.write(
            "height = %d\nwidth = %d\nb = %d\nm = %d\nmixing = %s\n"
            "snr_db = %r\nchange_fraction = %r\nseed = %d\n"
            % (
                config.height,
                config.width,
                config.b,
                config.m,
                config.mixing,
                config.snr_db,
                config.change_fraction,
                config.seed,
            )
        )
        fh.write("endmembers (b rows, m columns):\n")
        for row in result.endmembers.matrix:
            fh.write(" ".join("%.17g" % v for v in row) + "\n")
    return paths
