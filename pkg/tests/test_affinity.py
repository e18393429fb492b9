"""Stacked source vectors and cross-date affinity matrices."""

import numpy as np
import pytest

from hsicd.affinity import (
    DEFAULT_EPS,
    MixedAffinityMatrix,
    RegionLayout,
    StackedCube,
    affinity_batch,
    mixed_affinity,
    stack_sources,
)
from hsicd.cube import HyperCube
from hsicd.errors import DataError, ShapeError
from hsicd.unmixing import AbundanceCube


def _stacked(h, w, b, m, seed, low=0.1, high=1.0):
    rng = np.random.default_rng(seed)
    data = rng.uniform(low, high, (h, w, b + 2 * m)).astype(np.float32)
    return StackedCube(height=h, width=w, b=b, m=m, data=data)


class TestRegionLayout:
    @pytest.mark.parametrize(
        "ij,region",
        [
            ((0, 0), "A"),
            ((0, 4), "C"),
            ((4, 4), "B"),
            ((3, 3), "B"),
            ((3, 5), "D"),
            ((5, 5), "E"),
            ((6, 2), "C"),
        ],
    )
    def test_region_of_examples(self, ij, region):
        assert RegionLayout(b=3, m=2).region_of(*ij) == region

    @pytest.mark.parametrize("b,m", [(3, 2), (1, 1), (5, 1), (2, 4)])
    def test_masks_partition_grid_and_match_region_of(self, b, m):
        layout = RegionLayout(b=b, m=m)
        masks = layout.region_masks()
        total = sum(v.astype(int) for v in masks.values())
        np.testing.assert_array_equal(total, np.ones((layout.n, layout.n), int))
        for i in range(layout.n):
            for j in range(layout.n):
                hits = [k for k, v in masks.items() if v[i, j]]
                assert hits == [layout.region_of(i, j)]

    def test_region_sizes(self):
        masks = RegionLayout(b=3, m=2).region_masks()
        sizes = {k: int(v.sum()) for k, v in masks.items()}
        assert sizes == {"A": 9, "B": 4, "C": 24, "D": 8, "E": 4}

    def test_out_of_range_index(self):
        with pytest.raises(ShapeError):
            RegionLayout(b=3, m=2).region_of(7, 0)

    def test_degenerate_layout_rejected(self):
        with pytest.raises(ShapeError):
            RegionLayout(b=0, m=2)


class TestMixedAffinity:
    def test_two_band_hand_case(self):
        # identical dates with spectra (2, 4): ratios give exactly
        # [[1, 1.5], [0, 1]] in the spectral block
        layout = RegionLayout(b=2, m=1)
        p = np.array([2.0, 4.0, 1.0, 1.0])
        k = mixed_affinity(p, p, layout).values
        np.testing.assert_array_equal(k[:2, :2], [[1.0, 1.5], [0.0, 1.0]])

    def test_identical_inputs_have_unit_diagonal(self):
        layout = RegionLayout(b=4, m=2)
        rng = np.random.default_rng(0)
        p = rng.uniform(0.1, 1.0, layout.n)
        k = mixed_affinity(p, p, layout).values
        np.testing.assert_array_equal(np.diagonal(k), np.ones(layout.n, np.float32))

    def test_cross_source_region_exactly_zero(self):
        layout = RegionLayout(b=3, m=2)
        rng = np.random.default_rng(1)
        k = mixed_affinity(
            rng.uniform(0.1, 1, layout.n), rng.uniform(0.1, 1, layout.n), layout
        ).values
        c = layout.region_masks()["C"]
        assert (k[c] == 0.0).all()
        assert (k[~c] != 0.0).any()

    def test_zero_denominator_floors_positive(self):
        layout = RegionLayout(b=1, m=1)
        p1 = np.array([1.0, 1.0, 1.0])
        p2 = np.array([0.0, 1.0, 1.0])
        k = mixed_affinity(p1, p2, layout).values
        # 1 - (1 - 0)/1e-6, computed in float64 then cast
        assert k[0, 0] == np.float32(1.0 - 1.0 / DEFAULT_EPS)

    def test_negative_denominator_keeps_sign(self):
        layout = RegionLayout(b=1, m=1)
        p1 = np.array([1.0, 1.0, 1.0])
        p2 = np.array([-1e-9, 1.0, 1.0])
        k = mixed_affinity(p1, p2, layout).values
        expected = np.float32(1.0 - (1.0 - (-1e-9)) / (-DEFAULT_EPS))
        assert k[0, 0] == expected

    def test_unfloored_path_ignores_common_scale(self):
        # doubling both dates cancels exactly (powers of two are lossless)
        layout = RegionLayout(b=3, m=2)
        rng = np.random.default_rng(2)
        p1 = rng.uniform(0.1, 1, layout.n)
        p2 = rng.uniform(0.1, 1, layout.n)
        a = mixed_affinity(p1, p2, layout).values
        b = mixed_affinity(2.0 * p1, 2.0 * p2, layout).values
        np.testing.assert_array_equal(a, b)

    def test_length_and_finiteness_checked(self):
        layout = RegionLayout(b=2, m=1)
        with pytest.raises(ShapeError):
            mixed_affinity(np.ones(3), np.ones(4), layout)
        bad = np.array([1.0, np.nan, 1.0, 1.0])
        with pytest.raises(DataError):
            mixed_affinity(bad, np.ones(4), layout)

    def test_matrix_type_rejects_nonzero_cross_region(self):
        layout = RegionLayout(b=2, m=1)
        vals = np.ones((4, 4), np.float32)
        with pytest.raises(DataError, match="region C"):
            MixedAffinityMatrix(values=vals, layout=layout)


class TestStackSources:
    def _inputs(self, h=2, w=3, b=4, m=2, seed=0):
        rng = np.random.default_rng(seed)
        cube = HyperCube.from_array(rng.random((b, h, w)).astype(np.float32))
        lin = rng.dirichlet(np.ones(m), size=(h, w))
        non = rng.dirichlet(np.ones(m), size=(h, w))
        return (
            cube,
            AbundanceCube(height=h, width=w, m=m, kind="linear", data=lin),
            AbundanceCube(height=h, width=w, m=m, kind="nonlinear", data=non),
        )

    def test_segment_order_is_spectra_linear_nonlinear(self):
        cube, lin, non = self._inputs()
        out = stack_sources(cube, lin, non)
        assert (out.b, out.m, out.n) == (4, 2, 8)
        np.testing.assert_array_equal(
            out.data[1, 2, :4], cube.data[:, 1, 2]
        )
        np.testing.assert_array_equal(
            out.data[1, 2, 4:6], lin.data[1, 2].astype(np.float32)
        )
        np.testing.assert_array_equal(
            out.data[1, 2, 6:], non.data[1, 2].astype(np.float32)
        )

    def test_vectors_matches_pixel_layout(self):
        cube, lin, non = self._inputs()
        out = stack_sources(cube, lin, non)
        np.testing.assert_array_equal(out.vectors()[1 * 3 + 2], out.data[1, 2])

    def test_kind_order_enforced(self):
        cube, lin, non = self._inputs()
        with pytest.raises(ShapeError, match="kind"):
            stack_sources(cube, non, lin)

    def test_m_mismatch_rejected(self):
        cube, lin, non = self._inputs()
        rng = np.random.default_rng(1)
        non3 = AbundanceCube(
            height=2, width=3, m=3, kind="nonlinear",
            data=rng.dirichlet(np.ones(3), size=(2, 3)),
        )
        with pytest.raises(ShapeError):
            stack_sources(cube, lin, non3)

    def test_spatial_mismatch_rejected(self):
        cube, lin, non = self._inputs()
        small = HyperCube.from_array(cube.data[:, :1, :])
        with pytest.raises(ShapeError):
            stack_sources(small, lin, non)


class TestAffinityBatch:
    def test_bitwise_equal_to_per_pixel_loop(self):
        s1 = _stacked(3, 4, 3, 2, seed=3)
        s2 = _stacked(3, 4, 3, 2, seed=4)
        layout = RegionLayout(b=3, m=2)
        idx = [0, 5, 11, 2]
        batch = affinity_batch(s1, s2, idx)
        assert batch.shape == (4, 7, 7) and batch.dtype == np.float32
        for row, i in enumerate(idx):
            single = mixed_affinity(s1.vectors()[i], s2.vectors()[i], layout)
            np.testing.assert_array_equal(batch[row], single.values)

    def test_empty_index_list(self):
        s1 = _stacked(2, 2, 2, 1, seed=5)
        out = affinity_batch(s1, s1, [])
        assert out.shape == (0, 4, 4)

    def test_index_range_checked(self):
        s1 = _stacked(2, 2, 2, 1, seed=6)
        with pytest.raises(DataError):
            affinity_batch(s1, s1, [4])
        with pytest.raises(DataError):
            affinity_batch(s1, s1, [-1])

    def test_incongruent_cubes_rejected(self):
        s1 = _stacked(2, 2, 2, 1, seed=7)
        s2 = _stacked(2, 2, 3, 1, seed=8)
        with pytest.raises(ShapeError):
            affinity_batch(s1, s2, [0])
