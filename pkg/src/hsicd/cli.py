"""Command line front end.

Subcommands mirror the pipeline stages: `synth` builds a reference scene,
`unmix`/`predetect`/`train`/`infer` run stage groups standalone, `evaluate`
scores a map against a truth map, and `run` drives the whole pipeline from
a key=value config file with flag overrides. Every failure mode maps to a
stable nonzero exit code (see errors.py); 0 means success.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import statistics
import sys
from dataclasses import replace

import numpy as np

from . import pipeline, synthgen
from .affinity import affinity_batch, stack_sources
from .cube import CubePair, normalize_pair, read_envi, read_map, select_bands, write_map
from .errors import ChangeDetectError
from .net import Network, TrainConfig, load_checkpoint, save_checkpoint, save_trace, train
from .pipeline import RunConfig, coerce_config, evaluate, infer, parse_config_file
from .predetect import PredetectConfig, cva_change_map, cva_magnitude, select_pseudo_labels
from .unmixing import atgp, bfm_cube, fcls_cube, load_endmembers, save_endmembers


def _parse_bands(text: str | None) -> tuple[int, ...] | None:
    if text is None:
        return None
    return tuple(int(tok) for tok in text.replace(",", " ").split())


def _load_pair(args) -> CubePair:
    cube1 = read_envi(args.time1)
    cube2 = read_envi(args.time2)
    bands = _parse_bands(getattr(args, "bands", None))
    if bands is not None:
        cube1 = select_bands(cube1, bands)
        cube2 = select_bands(cube2, bands)
    return normalize_pair(CubePair(time1=cube1, time2=cube2))


def _unmix_pair(pair: CubePair, m: int):
    pooled = np.concatenate([pair.time1.pixels(), pair.time2.pixels()])
    endmembers = atgp(pooled, m)
    stacked = []
    for cube in (pair.time1, pair.time2):
        linear = fcls_cube(endmembers, cube)
        nonlinear = bfm_cube(endmembers, cube, init=linear)
        stacked.append(stack_sources(cube, linear, nonlinear))
    return endmembers, stacked[0], stacked[1]


def _cmd_synth(args) -> int:
    config = synthgen.SceneConfig(
        height=args.height,
        width=args.width,
        b=args.bands,
        m=args.m,
        mixing=args.mixing,
        snr_db=math.inf if args.snr_db is None else args.snr_db,
        change_fraction=args.change_fraction,
        seed=args.seed,
    )
    result = synthgen.gen_scene(config)
    paths = synthgen.save_scene(result, config, args.outdir)
    for name in ("time1", "time2", "truth", "sidecar"):
        print(f"{name}={paths[name]}")
    return 0


def _cmd_unmix(args) -> int:
    pair = _load_pair(args)
    os.makedirs(args.outdir, exist_ok=True)
    endmembers, stacked1, stacked2 = _unmix_pair(pair, args.m)
    save_endmembers(endmembers, os.path.join(args.outdir, "endmembers.txt"))
    for label, stacked, cube in (
        ("time1", stacked1, pair.time1),
        ("time2", stacked2, pair.time2),
    ):
        lin = stacked.data[:, :, cube.bands : cube.bands + args.m]
        nonlin = stacked.data[:, :, cube.bands + args.m :]
        np.save(os.path.join(args.outdir, f"abund_linear_{label}.npy"), lin)
        np.save(os.path.join(args.outdir, f"abund_bilinear_{label}.npy"), nonlin)
    print(f"endmembers={os.path.join(args.outdir, 'endmembers.txt')}")
    return 0


def _cmd_predetect(args) -> int:
    pair = _load_pair(args)
    os.makedirs(args.outdir, exist_ok=True)
    magnitude = cva_magnitude(pair)
    baseline = cva_change_map(magnitude, float(np.median(magnitude.values)))
    write_map(baseline, os.path.join(args.outdir, "cva_map.pgm"))
    config = PredetectConfig(
        changed_percentile=args.changed_percentile,
        unchanged_percentile=args.unchanged_percentile,
        positive_fraction=args.positive_fraction,
        seed=args.seed,
    )
    samples = select_pseudo_labels(magnitude, config)
    samples.to_csv(os.path.join(args.outdir, "samples.csv"), config=config)
    print(f"samples={os.path.join(args.outdir, 'samples.csv')}")
    return 0


def _cmd_train(args) -> int:
    pair = _load_pair(args)
    os.makedirs(args.outdir, exist_ok=True)
    endmembers, stacked1, stacked2 = _unmix_pair(pair, args.m)
    save_endmembers(endmembers, os.path.join(args.outdir, "endmembers.txt"))
    magnitude = cva_magnitude(pair)
    pre = PredetectConfig(seed=args.seed)
    samples = select_pseudo_labels(magnitude, pre)
    samples.to_csv(os.path.join(args.outdir, "samples.csv"), config=pre)

    net = Network(b=pair.bands, m=args.m, seed=args.seed)
    config = TrainConfig(
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        steps=args.steps,
        seed=args.seed,
    )

    def affinity_source(indices):
        return affinity_batch(stacked1, stacked2, indices)

    trace, state = train(net, samples, affinity_source, config)
    base = os.path.join(args.outdir, "checkpoint")
    save_checkpoint(net, state, base)
    save_trace(trace, os.path.join(args.outdir, "trace.csv"))
    print(f"checkpoint={base}")
    return 0


def _cmd_infer(args) -> int:
    pair = _load_pair(args)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    net, _ = load_checkpoint(args.checkpoint)
    endmembers = load_endmembers(args.endmembers)
    stacked = []
    for cube in (pair.time1, pair.time2):
        linear = fcls_cube(endmembers, cube)
        nonlinear = bfm_cube(endmembers, cube, init=linear)
        stacked.append(stack_sources(cube, linear, nonlinear))
    change_map = infer(net, stacked[0], stacked[1])
    write_map(change_map, args.out)
    print(f"map={args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    predicted = read_map(args.predicted)
    truth = read_map(args.truth)
    metrics = evaluate(predicted, truth)
    print(metrics.to_text())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(metrics.to_text() + "\n")
    return 0


def _cmd_run(args) -> int:
    mapping: dict = {}
    if args.config:
        mapping.update(parse_config_file(args.config))
    for key in (
        "time1",
        "time2",
        "truth",
        "outdir",
        "m",
        "bands",
        "seed",
        "steps",
        "batch_size",
        "learning_rate",
        "changed_percentile",
        "unchanged_percentile",
        "positive_fraction",
    ):
        value = getattr(args, key, None)
        if value is not None:
            mapping[key] = value
    config = RunConfig(**coerce_config(mapping))

    if args.dump_affinity is not None:
        _dump_affinity(config, args.dump_affinity)

    if args.repeats <= 1:
        result = pipeline.run_end_to_end(config)
        if result.metrics is not None:
            print("metrics " + result.metrics.to_text())
            print("baseline " + result.baseline_metrics.to_text())
        return 0

    oas, kappas = [], []
    for rep in range(args.repeats):
        rep_config = replace(
            config,
            outdir=os.path.join(config.outdir, f"run{rep}"),
            seed=config.seed + rep,
        )
        result = pipeline.run_end_to_end(rep_config)
        if result.metrics is not None:
            print(f"run{rep} " + result.metrics.to_text())
            oas.append(result.metrics.oa)
            kappas.append(result.metrics.kappa)
    if oas:
        print(
            f"median oa={statistics.median(oas):.6f} "
            f"kappa={statistics.median(kappas):.6f}"
        )
    return 0


def _dump_affinity(config: RunConfig, pixel: int) -> None:
    """Write one pixel's affinity matrix as text (debug only)."""
    cube1 = read_envi(config.time1)
    cube2 = read_envi(config.time2)
    if config.bands is not None:
        cube1 = select_bands(cube1, config.bands)
        cube2 = select_bands(cube2, config.bands)
    pair = normalize_pair(CubePair(time1=cube1, time2=cube2))
    _, stacked1, stacked2 = _unmix_pair(pair, config.m)
    block = affinity_batch(stacked1, stacked2, [pixel])
    os.makedirs(config.outdir, exist_ok=True)
    path = os.path.join(config.outdir, f"affinity_{pixel}.txt")
    np.savetxt(path, block[0], fmt="%.9g")
    print(f"affinity={path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsicd", description="Hyperspectral change detection pipeline."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log stage timings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-date scene")
    p.add_argument("--outdir", required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--bands", type=int, default=32)
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--mixing", choices=("linear", "bilinear"), default="linear")
    p.add_argument("--snr-db", type=float, default=None, help="omit for noiseless")
    p.add_argument("--change-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    def add_pair_args(p, with_bands=True):
        p.add_argument("--time1", required=True, help="ENVI header of date 1")
        p.add_argument("--time2", required=True, help="ENVI header of date 2")
        if with_bands:
            p.add_argument("--bands", help="band indices to keep, e.g. 0,2,4")

    p = sub.add_parser("unmix", help="extract endmembers and unmix both dates")
    add_pair_args(p)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=_cmd_unmix)

    p = sub.add_parser("predetect", help="magnitude map and pseudo labels")
    add_pair_args(p)
    p.add_argument("--outdir", required=True)
    p.add_argument("--changed-percentile", type=float, default=5.0)
    p.add_argument("--unchanged-percentile", type=float, default=60.0)
    p.add_argument("--positive-fraction", type=float, default=0.10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_predetect)

    p = sub.add_parser("train", help="train the classifier on pseudo labels")
    add_pair_args(p)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--steps", type=int, default=30000)
    p.add_argument("--batch-size", type=int, default=96)
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="classify a pair with a trained checkpoint")
    add_pair_args(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint base path")
    p.add_argument("--endmembers", required=True, help="endmember text file")
    p.add_argument("--out", required=True, help="output PGM map path")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("evaluate", help="score a change map against truth")
    p.add_argument("--predicted", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", help="also write the metrics line here")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("run", help="full pipeline from a config file")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--time1")
    p.add_argument("--time2")
    p.add_argument("--truth")
    p.add_argument("--outdir")
    p.add_argument("--m", type=int)
    p.add_argument("--bands")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--changed-percentile", type=float, dest="changed_percentile")
    p.add_argument("--unchanged-percentile", type=float, dest="unchanged_percentile")
    p.add_argument("--positive-fraction", type=float, dest="positive_fraction")
    p.add_argument("--repeats", type=int, default=1, help="repeat with seed+i")
    p.add_argument(
        "--dump-affinity",
        type=int,
        default=None,
        metavar="PIXEL",
        help="debug: write one pixel's affinity matrix as text",
    )
    p.set_defaults(func=_cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(name)s %(message)s",
    )
    try:
        return args.func(args)
    except ChangeDetectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
