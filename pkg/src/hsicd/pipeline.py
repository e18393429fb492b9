"""End-to-end change detection: two ENVI cubes in, a change map out.

Stage order is fixed: read, optional band selection, joint normalization,
endmember extraction on the pooled pixels of both dates, linear and
bilinear unmixing per date, source stacking, magnitude pre-detection,
pseudo-label selection, network training, inference, and (only if a truth
map was supplied) evaluation. The truth file is not opened before the
inference stage has produced its map, so it cannot leak into training.

A plain magnitude-threshold map (median threshold) is written on every run
as the baseline the trained map has to beat. Each stage logs its wall time
through the ``hsicd.pipeline`` logger.

One run seed fans out to the stages through fixed offsets, so a run is
bit-reproducible end to end while the stages stay decorrelated.
"""

from __future__ import annotations

import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .affinity import DEFAULT_EPS, affinity_batch, stack_sources
from .cube import (
    BinaryMap,
    CubePair,
    normalize_pair,
    read_envi,
    read_map,
    select_bands,
    write_map,
)
from .errors import DataError, FormatError, ShapeError
from .net import Network, TrainConfig, save_checkpoint, save_trace, train
from .predetect import (
    LabeledSampleSet,
    PredetectConfig,
    cva_change_map,
    cva_magnitude,
    select_pseudo_labels,
)
from .unmixing import atgp, bfm_cube, fcls_cube, save_endmembers

log = logging.getLogger("hsicd.pipeline")

# fan-out offsets from the run seed; arbitrary but frozen so that runs
# stay reproducible across versions
_SEED_PREDETECT = 11
_SEED_NET = 23
_SEED_TRAIN = 37

_INFER_BATCH = 96


def _scores_from_counts(tp: int, tn: int, fp: int, fn: int):
    total = tp + tn + fp + fn
    if total == 0:
        raise DataError("empty confusion matrix")
    oa = (tp + tn) / total
    p = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / total**2
    if p >= 1.0:
        # single-class agreement is perfect or vacuous, nothing in between
        kappa = 1.0 if oa == 1.0 else 0.0
    else:
        kappa = (oa - p) / (1.0 - p)
    return oa, p, kappa


@dataclass(frozen=True, slots=True)
class Metrics:
    """Confusion counts plus overall accuracy, chance agreement, kappa.

    Changed = positive. The scores are redundant with the counts by
    construction; the constructor enforces that bit-exactly, so a Metrics
    can only ever hold values every reader can recompute.
    """

    tp: int
    tn: int
    fp: int
    fn: int
    oa: float
    p: float
    kappa: float

    def __post_init__(self):
        counts = (self.tp, self.tn, self.fp, self.fn)
        if any(c < 0 for c in counts):
            raise DataError(f"negative confusion count in {counts}")
        if sum(counts) == 0:
            raise DataError("empty confusion matrix")
        oa, p, kappa = _scores_from_counts(*counts)
        if (self.oa, self.p, self.kappa) != (oa, p, kappa):
            raise DataError(
                f"scores ({self.oa}, {self.p}, {self.kappa}) do not match "
                f"counts {counts}"
            )

    @classmethod
    def from_counts(cls, tp: int, tn: int, fp: int, fn: int) -> "Metrics":
        oa, p, kappa = _scores_from_counts(tp, tn, fp, fn)
        return cls(tp=tp, tn=tn, fp=fp, fn=fn, oa=oa, p=p, kappa=kappa)

    def to_text(self) -> str:
        return (
            f"tp={self.tp} tn={self.tn} fp={self.fp} fn={self.fn} "
            f"oa={self.oa:.6f} kappa={self.kappa:.6f}"
        )


def evaluate(predicted: BinaryMap, truth: BinaryMap) -> Metrics:
    """Confusion counts of predicted against truth, changed = positive."""
    if (predicted.height, predicted.width) != (truth.height, truth.width):
        raise ShapeError(
            f"map shapes differ: {predicted.height}x{predicted.width} vs "
            f"{truth.height}x{truth.width}"
        )
    p = predicted.labels.astype(bool)
    t = truth.labels.astype(bool)
    tp = int(np.count_nonzero(p & t))
    tn = int(np.count_nonzero(~p & ~t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return Metrics.from_counts(tp=tp, tn=tn, fp=fp, fn=fn)


def infer(
    net: Network,
    stacked1,
    stacked2,
    batch_size: int = _INFER_BATCH,
    eps: float = DEFAULT_EPS,
) -> BinaryMap:
    """Classify every pixel's affinity matrix in eval mode."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    if stacked1.n != net.n:
        raise ShapeError(f"stacked n={stacked1.n} but network expects n={net.n}")
    n_px = stacked1.height * stacked1.width
    labels = np.empty(n_px, dtype=np.uint8)
    for lo in range(0, n_px, batch_size):
        idx = np.arange(lo, min(lo + batch_size, n_px))
        block = affinity_batch(stacked1, stacked2, idx, eps=eps)
        labels[idx] = net.predict(block.astype(net.dtype, copy=False))
    return BinaryMap.from_array(labels.reshape(stacked1.height, stacked1.width))


@dataclass(frozen=True, slots=True)
class RunConfig:
    time1: str
    time2: str
    outdir: str
    m: int
    truth: str | None = None
    bands: tuple[int, ...] | None = None
    seed: int = 0
    steps: int = 30000
    batch_size: int = 96
    learning_rate: float = 1e-4
    changed_percentile: float = 5.0
    unchanged_percentile: float = 60.0
    positive_fraction: float = 0.10
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.m < 1:
            raise ShapeError(f"m must be >= 1, got {self.m}")


_INT_KEYS = {"m", "seed", "steps", "batch_size"}
_FLOAT_KEYS = {
    "learning_rate",
    "changed_percentile",
    "unchanged_percentile",
    "positive_fraction",
    "eps",
}


def parse_config_file(path: str) -> dict:
    """Flat key=value file, # comments, later keys win."""
    out: dict = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{ln}: expected key=value, got {raw.rstrip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key] = value
    return out


def coerce_config(mapping: dict) -> dict:
    """String values from a file or CLI into RunConfig field types."""
    known = set(RunConfig.__dataclass_fields__)
    out: dict = {}
    for key, value in mapping.items():
        if key not in known:
            raise DataError(f"unknown config key {key!r}")
        if value is None:
            continue
        if key in _INT_KEYS:
            out[key] = int(value)
        elif key in _FLOAT_KEYS:
            out[key] = float(value)
        elif key == "bands":
            if isinstance(value, str):
                out[key] = tuple(int(tok) for tok in value.replace(",", " ").split())
            else:
                out[key] = tuple(int(v) for v in value)
        else:
            out[key] = value
    return out


@dataclass(frozen=True, slots=True)
class RunResult:
    change_map: BinaryMap
    baseline_map: BinaryMap
    samples: LabeledSampleSet
    trace: tuple
    metrics: Metrics | None
    baseline_metrics: Metrics | None
    paths: dict


@contextmanager
def _stage(name: str):
    start = time.perf_counter()
    yield
    log.info("stage=%s seconds=%.3f", name, time.perf_counter() - start)


def _load_pair(config: RunConfig) -> CubePair:
    cube1 = read_envi(config.time1)
    cube2 = read_envi(config.time2)
    if config.bands is not None:
        cube1 = select_bands(cube1, config.bands)
        cube2 = select_bands(cube2, config.bands)
    return normalize_pair(CubePair(time1=cube1, time2=cube2))


def run_end_to_end(config: RunConfig) -> RunResult:
    # input paths must exist up front; the truth map itself is only ever
    # opened after inference, so it cannot influence training
    for path in (config.time1, config.time2, config.truth):
        if path is not None and not os.path.exists(path):
            raise FormatError(f"input file not found: {path}")
    os.makedirs(config.outdir, exist_ok=True)
    paths = {
        name: os.path.join(config.outdir, fname)
        for name, fname in (
            ("endmembers", "endmembers.txt"),
            ("samples", "samples.csv"),
            ("baseline_map", "cva_map.pgm"),
            ("change_map", "change_map.pgm"),
            ("checkpoint", "checkpoint"),
            ("trace", "trace.csv"),
            ("metrics", "metrics.txt"),
            ("baseline_metrics", "cva_metrics.txt"),
        )
    }

    with _stage("read"):
        pair = _load_pair(config)

    with _stage("endmembers"):
        pooled = np.concatenate([pair.time1.pixels(), pair.time2.pixels()])
        endmembers = atgp(pooled, config.m)
        save_endmembers(endmembers, paths["endmembers"])

    stacked = []
    for label, cube in (("time1", pair.time1), ("time2", pair.time2)):
        with _stage(f"unmix-{label}"):
            linear = fcls_cube(endmembers, cube)
            nonlinear = bfm_cube(endmembers, cube, init=linear)
            stacked.append(stack_sources(cube, linear, nonlinear))
    stacked1, stacked2 = stacked

    with _stage("predetect"):
        magnitude = cva_magnitude(pair)
        baseline_map = cva_change_map(
            magnitude, float(np.median(magnitude.values))
        )
        write_map(baseline_map, paths["baseline_map"])
        pre_cfg = PredetectConfig(
            changed_percentile=config.changed_percentile,
            unchanged_percentile=config.unchanged_percentile,
            positive_fraction=config.positive_fraction,
            seed=config.seed + _SEED_PREDETECT,
        )
        samples = select_pseudo_labels(magnitude, pre_cfg)
        samples.to_csv(paths["samples"], config=pre_cfg)

    with _stage("train"):
        net = Network(b=pair.bands, m=config.m, seed=config.seed + _SEED_NET)

        def affinity_source(indices):
            return affinity_batch(stacked1, stacked2, indices, eps=config.eps).astype(
                net.dtype, copy=False
            )

        train_cfg = TrainConfig(
            batch_size=config.batch_size,
            learning_rate=config.learning_rate,
            steps=config.steps,
            seed=config.seed + _SEED_TRAIN,
        )
        trace, opt_state = train(net, samples, affinity_source, train_cfg)
        save_trace(trace, paths["trace"])
        save_checkpoint(net, opt_state, paths["checkpoint"])

    with _stage("infer"):
        change_map = infer(net, stacked1, stacked2, eps=config.eps)
        write_map(change_map, paths["change_map"])

    metrics = baseline_metrics = None
    if config.truth is not None:
        with _stage("evaluate"):
            truth = read_map(
                config.truth, expected_shape=(pair.height, pair.width)
            )
            metrics = evaluate(change_map, truth)
            baseline_metrics = evaluate(baseline_map, truth)
            with open(paths["metrics"], "w") as fh:
                fh.write(metrics.to_text() + "\n")
            with open(paths["baseline_metrics"], "w") as fh:
                fh.write(baseline_metrics.to_text() + "\n")
            log.info("metrics %s", metrics.to_text())
            log.info("baseline %s", baseline_metrics.to_text())

    return RunResult(
        change_map=change_map,
        baseline_map=baseline_map,
        samples=samples,
        trace=tuple(trace),
        metrics=metrics,
        baseline_metrics=baseline_metrics,
        paths=paths,
    )
