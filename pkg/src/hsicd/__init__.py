"""Hyperspectral change detection from bi-temporal image pairs.

The package unmixes both acquisition dates with a linear and a bilinear
model, stacks spectra and abundances into per-pixel source vectors, turns
each pixel into a mixed-affinity matrix, and classifies those matrices
with a small convolutional network trained on magnitude-based pseudo
labels. See pipeline.run_end_to_end for the full flow and cli for the
command line entry points.
"""

from .affinity import (
    MixedAffinityMatrix,
    RegionLayout,
    StackedCube,
    affinity_batch,
    mixed_affinity,
    stack_sources,
)
from .cube import (
    BinaryMap,
    CubePair,
    HyperCube,
    normalize_pair,
    read_envi,
    read_map,
    select_bands,
    write_envi,
    write_map,
)
from .errors import (
    CapacityError,
    ChangeDetectError,
    ConvergenceError,
    DataError,
    DegeneracyError,
    DivergenceError,
    FormatError,
    NumericError,
    ShapeError,
    SizeError,
)
from .pipeline import Metrics, RunConfig, RunResult, evaluate, infer, run_end_to_end
from .predetect import (
    LabeledSampleSet,
    MagnitudeMap,
    PredetectConfig,
    cva_change_map,
    cva_magnitude,
    select_pseudo_labels,
)
from .synthgen import SceneConfig, SceneResult, gen_endmembers, gen_scene, save_scene
from .unmixing import (
    AbundanceCube,
    AbundanceVector,
    EndmemberSet,
    atgp,
    bfm_cube,
    bfm_forward,
    bfm_unmix,
    fcls,
    fcls_cube,
    load_endmembers,
    nnls,
    save_endmembers,
)

__version__ = "0.1.0"

__all__ = [
    "AbundanceCube",
    "AbundanceVector",
    "BinaryMap",
    "CapacityError",
    "ChangeDetectError",
    "ConvergenceError",
    "CubePair",
    "DataError",
    "DegeneracyError",
    "DivergenceError",
    "EndmemberSet",
    "FormatError",
    "HyperCube",
    "LabeledSampleSet",
    "MagnitudeMap",
    "Metrics",
    "MixedAffinityMatrix",
    "NumericError",
    "PredetectConfig",
    "RegionLayout",
    "RunConfig",
    "RunResult",
    "SceneConfig",
    "SceneResult",
    "ShapeError",
    "SizeError",
    "StackedCube",
    "affinity_batch",
    "atgp",
    "bfm_cube",
    "bfm_forward",
    "bfm_unmix",
    "cva_change_map",
    "cva_magnitude",
    "evaluate",
    "fcls",
    "fcls_cube",
    "gen_endmembers",
    "gen_scene",
    "infer",
    "load_endmembers",
    "mixed_affinity",
    "nnls",
    "normalize_pair",
    "read_envi",
    "read_map",
    "run_end_to_end",
    "save_endmembers",
    "save_scene",
    "select_bands",
    "select_pseudo_labels",
    "stack_sources",
    "write_envi",
    "write_map",
]
