"""Change-vector-analysis pre-detection and pseudo-label selection.

The per-pixel magnitude of the spectral difference between dates drives two
things: a plain thresholded baseline change map, and the high-confidence
pseudo-labels used to train the network without ground truth. Pixels in the
top tail of the magnitude distribution seed the positive (changed) pool,
pixels in the bottom tail the negative pool, and a seeded draw keeps the
positive:negative ratio at exactly 1:2.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .cube import BinaryMap, CubePair
from .errors import CapacityError, DataError, FormatError, ShapeError


@dataclass(frozen=True, slots=True)
class MagnitudeMap:
    """Nonnegative per-pixel change magnitude."""

    height: int
    width: int
    values: np.ndarray

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.shape != (self.height, self.width):
            raise ShapeError(
                f"magnitude shape {vals.shape} != ({self.height}, {self.width})"
            )
        if not np.isfinite(vals).all():
            raise DataError("non-finite magnitude")
        if vals.min() < 0:
            raise DataError("negative magnitude")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True, slots=True)
class PredetectConfig:
    """Pool windows and sampling controls for pseudo-label selection.

    changed_percentile: size of the top-magnitude pool, in percent.
    unchanged_percentile: size of the bottom-magnitude pool, in percent.
    positive_fraction: fraction of the changed pool drawn as positives.
    """

    changed_percentile: float = 5.0
    unchanged_percentile: float = 60.0
    positive_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.changed_percentile <= 100):
            raise DataError(f"changed_percentile out of (0,100]: {self.changed_percentile}")
        if not (0 < self.unchanged_percentile <= 100):
            raise DataError(
                f"unchanged_percentile out of (0,100]: {self.unchanged_percentile}"
            )
        if self.changed_percentile + self.unchanged_percentile > 100:
            raise DataError(
                "percentile windows overlap: "
                f"{self.changed_percentile} + {self.unchanged_percentile} > 100"
            )
        if not (0 < self.positive_fraction <= 1):
            raise DataError(f"positive_fraction out of (0,1]: {self.positive_fraction}")


@dataclass(frozen=True, slots=True)
class LabeledSampleSet:
    """Pseudo-labeled training pixels: (flat_index, label) pairs."""

    samples: tuple[tuple[int, int], ...]
    seed: int
    positives: int
    negatives: int

    def __post_init__(self):
        idx = [s[0] for s in self.samples]
        if len(set(idx)) != len(idx):
            raise DataError("duplicate pixel index in sample set")
        if self.negatives != 2 * self.positives:
            raise DataError(
                f"ratio violation: {self.positives} positives, "
                f"{self.negatives} negatives (want 1:2)"
            )
        n_pos = sum(1 for _, lab in self.samples if lab == 1)
        n_neg = sum(1 for _, lab in self.samples if lab == 0)
        if (n_pos, n_neg) != (self.positives, self.negatives):
            raise DataError("sample labels disagree with recorded counts")

    def to_csv(self, path: str, config: PredetectConfig | None = None) -> None:
        lines = []
        if config is not None:
            lines.append(
                "# changed_percentile=%g unchanged_percentile=%g "
                "positive_fraction=%g seed=%d"
                % (
                    config.changed_percentile,
                    config.unchanged_percentile,
                    config.positive_fraction,
                    self.seed,
                )
            )
        else:
            lines.append(f"# seed={self.seed}")
        lines.append("pixel_index,label")
        lines.extend(f"{i},{lab}" for i, lab in self.samples)
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path: str) -> "LabeledSampleSet":
        samples = []
        seed = 0
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    match = re.search(r"seed=(-?\d+)", line)
                    if match:
                        seed = int(match.group(1))
                    continue
                if line == "pixel_index,label":
                    continue
                try:
                    idx_s, lab_s = line.split(",")
                    samples.append((int(idx_s), int(lab_s)))
                except ValueError:
                    raise FormatError(f"{path}: bad sample line {line!r}") from None
        n_pos = sum(1 for _, lab in samples if lab == 1)
        n_neg = len(samples) - n_pos
        return cls(
            samples=tuple(samples), seed=seed, positives=n_pos, negatives=n_neg
        )


def cva_magnitude(pair: CubePair) -> MagnitudeMap:
    """Euclidean norm of the spectral difference vector at every pixel."""
    diff = pair.time1.data.astype(np.float64) - pair.time2.data.astype(np.float64)
    mag = np.sqrt((diff * diff).sum(axis=0))
    return MagnitudeMap(height=pair.height, width=pair.width, values=mag)


def select_pseudo_labels(
    mag: MagnitudeMap, config: PredetectConfig
) -> LabeledSampleSet:
    """Draw seeded 1:2 positive:negative pseudo-labels from magnitude tails.

    Pool membership is by rank: with N pixels, the changed pool is the
    ceil-free floor(N * changed_percentile / 100) highest-magnitude pixels
    and the unchanged pool the floor(N * unchanged_percentile / 100) lowest.
    Ranking ties break by pixel index (stable sort), so the result is a pure
    function of (magnitudes, config).
    """
    flat = mag.values.ravel()
    n_px = flat.size
    order = np.argsort(flat, kind="stable")
    k_changed = int(n_px * config.changed_percentile / 100.0)
    k_unchanged = int(n_px * config.unchanged_percentile / 100.0)
    if k_changed < 1:
        raise CapacityError(
            f"changed pool empty: {n_px} pixels at top {config.changed_percentile}%"
        )
    if k_unchanged < 1:
        raise CapacityError(
            f"unchanged pool empty: {n_px} pixels at bottom "
            f"{config.unchanged_percentile}%"
        )
    changed_pool = order[n_px - k_changed :]
    unchanged_pool = order[:k_unchanged]

    n_pos = max(1, int(config.positive_fraction * k_changed))
    n_neg = 2 * n_pos
    if n_neg > k_unchanged:
        n_ach = k_unchanged // 2
        raise CapacityError(
            f"unchanged pool ({k_unchanged}) cannot supply {n_neg} negatives; "
            f"achievable: {n_ach} positives / {2 * n_ach} negatives"
        )
    rng = np.random.default_rng(config.seed)
    pos = rng.choice(changed_pool, size=n_pos, replace=False)
    neg = rng.choice(unchanged_pool, size=n_neg, replace=False)
    samples = tuple((int(i), 1) for i in pos) + tuple((int(i), 0) for i in neg)
    return LabeledSampleSet(
        samples=samples, seed=config.seed, positives=n_pos, negatives=n_neg
    )


def cva_change_map(mag: MagnitudeMap, threshold: float) -> BinaryMap:
    """Label 1 exactly where magnitude exceeds the threshold."""
    threshold = float(threshold)
    if not np.isfinite(threshold):
        raise DataError(f"threshold must be finite, got {threshold}")
    labels = (mag.values > threshold).astype(np.uint8)
    return BinaryMap(height=mag.height, width=mag.width, labels=labels)
