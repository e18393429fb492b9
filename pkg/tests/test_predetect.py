"""Magnitude pre-detection, baseline thresholding, pseudo-label selection."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsicd.cube import CubePair, HyperCube
from hsicd.errors import CapacityError, DataError, FormatError, ShapeError
from hsicd.predetect import (
    LabeledSampleSet,
    MagnitudeMap,
    PredetectConfig,
    cva_change_map,
    cva_magnitude,
    select_pseudo_labels,
)


def _ramp_map():
    return MagnitudeMap(
        height=10, width=10, values=np.arange(100, dtype=np.float64).reshape(10, 10)
    )


class TestMagnitude:
    def test_euclidean_norm_of_difference(self):
        a = np.zeros((2, 2, 2), np.float32)
        b = np.zeros((2, 2, 2), np.float32)
        b[0] = 3.0
        b[1] = 4.0
        pair = CubePair(
            time1=HyperCube.from_array(a), time2=HyperCube.from_array(b)
        )
        out = cva_magnitude(pair)
        np.testing.assert_array_equal(out.values, np.full((2, 2), 5.0))

    def test_identical_dates_give_zero(self):
        rng = np.random.default_rng(0)
        a = rng.random((3, 4, 4)).astype(np.float32)
        pair = CubePair(
            time1=HyperCube.from_array(a), time2=HyperCube.from_array(a)
        )
        assert cva_magnitude(pair).values.max() == 0.0

    def test_map_validation(self):
        with pytest.raises(DataError):
            MagnitudeMap(height=1, width=2, values=np.array([[1.0, -0.5]]))
        with pytest.raises(DataError):
            MagnitudeMap(height=1, width=1, values=np.array([[np.nan]]))
        with pytest.raises(ShapeError):
            MagnitudeMap(height=2, width=2, values=np.zeros((1, 2)))


class TestChangeMap:
    def test_strictly_above_threshold(self):
        out = cva_change_map(_ramp_map(), 94.5)
        assert int(out.labels.sum()) == 5
        out = cva_change_map(_ramp_map(), 95.0)  # equality is not a change
        assert int(out.labels.sum()) == 4

    def test_non_finite_threshold_rejected(self):
        with pytest.raises(DataError):
            cva_change_map(_ramp_map(), np.inf)


class TestSelectPseudoLabels:
    def test_ramp_pools_and_counts(self):
        out = select_pseudo_labels(_ramp_map(), PredetectConfig(seed=3))
        # top-5% pool is {95..99}, bottom-60% pool is {0..59}
        assert (out.positives, out.negatives) == (1, 2)
        pos = [i for i, lab in out.samples if lab == 1]
        neg = [i for i, lab in out.samples if lab == 0]
        assert all(95 <= i <= 99 for i in pos)
        assert all(0 <= i <= 59 for i in neg)

    def test_same_seed_reproduces(self):
        a = select_pseudo_labels(_ramp_map(), PredetectConfig(seed=7))
        b = select_pseudo_labels(_ramp_map(), PredetectConfig(seed=7))
        assert a == b

    def test_constant_magnitude_still_works(self):
        flat = MagnitudeMap(height=10, width=10, values=np.ones((10, 10)))
        out = select_pseudo_labels(flat, PredetectConfig(seed=1))
        idx = [i for i, _ in out.samples]
        assert len(set(idx)) == 3

    def test_capacity_error_reports_achievable(self):
        mag = MagnitudeMap(
            height=1, width=10, values=np.arange(10, dtype=float)[None]
        )
        cfg = PredetectConfig(
            changed_percentile=50.0, unchanged_percentile=30.0, positive_fraction=1.0
        )
        with pytest.raises(CapacityError, match="achievable: 1 positives"):
            select_pseudo_labels(mag, cfg)

    def test_empty_changed_pool(self):
        mag = MagnitudeMap(height=1, width=10, values=np.arange(10, dtype=float)[None])
        with pytest.raises(CapacityError, match="changed pool empty"):
            select_pseudo_labels(mag, PredetectConfig(changed_percentile=5.0))


class TestPredetectConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"changed_percentile": 0.0},
            {"changed_percentile": 101.0},
            {"unchanged_percentile": 0.0},
            {"changed_percentile": 60.0, "unchanged_percentile": 50.0},
            {"positive_fraction": 0.0},
            {"positive_fraction": 1.5},
        ],
    )
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(DataError):
            PredetectConfig(**kwargs)


class TestSampleSet:
    def test_csv_round_trip(self, tmp_path):
        out = select_pseudo_labels(_ramp_map(), PredetectConfig(seed=5))
        path = str(tmp_path / "samples.csv")
        out.to_csv(path, config=PredetectConfig(seed=5))
        back = LabeledSampleSet.from_csv(path)
        assert back == out

    def test_bad_line_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("pixel_index,label\n3,one\n")
        with pytest.raises(FormatError):
            LabeledSampleSet.from_csv(str(path))

    def test_duplicate_index_rejected(self):
        with pytest.raises(DataError):
            LabeledSampleSet(
                samples=((1, 1), (1, 0), (2, 0)), seed=0, positives=1, negatives=2
            )

    def test_ratio_enforced(self):
        with pytest.raises(DataError, match="ratio"):
            LabeledSampleSet(
                samples=((1, 1), (2, 0)), seed=0, positives=1, negatives=1
            )

    def test_counts_must_match_labels(self):
        with pytest.raises(DataError):
            LabeledSampleSet(
                samples=((1, 0), (2, 0), (3, 0)), seed=0, positives=1, negatives=2
            )


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_positives_never_rank_below_negatives(seed):
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(5, 12)), int(rng.integers(5, 12))
    mag = MagnitudeMap(height=h, width=w, values=rng.random((h, w)))
    cfg = PredetectConfig(seed=seed)
    try:
        out = select_pseudo_labels(mag, cfg)
    except CapacityError:
        return
    flat = mag.values.ravel()
    pos = [flat[i] for i, lab in out.samples if lab == 1]
    neg = [flat[i] for i, lab in out.samples if lab == 0]
    assert out.negatives == 2 * out.positives
    assert min(pos) >= max(neg)
