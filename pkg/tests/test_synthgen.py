"""Scene generator: config validation, endmember geometry, ground-truth
bookkeeping (simplex abundances, change fraction, noise level), and the
round trip through the on-disk formats."""

import math

import numpy as np
import pytest

from hsicd.cube import read_envi, read_map
from hsicd.errors import ConvergenceError, DataError, ShapeError
from hsicd.synthgen import SceneConfig, gen_endmembers, gen_scene, save_scene
from hsicd.unmixing import bfm_forward


def _angle_deg(x, y):
    c = x @ y / (np.linalg.norm(x) * np.linalg.norm(y))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def _config(**kw):
    base = dict(height=24, width=24, b=16, m=3, seed=0)
    base.update(kw)
    return SceneConfig(**base)


class TestSceneConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(height=0),
            dict(width=0),
            dict(m=1),  # conversion change needs a second material
            dict(m=17),  # more endmembers than bands
        ],
    )
    def test_bad_geometry(self, kw):
        with pytest.raises(ShapeError):
            _config(**kw)

    @pytest.mark.parametrize(
        "kw",
        [
            dict(mixing="quadratic"),
            dict(change_fraction=0.0),
            dict(change_fraction=1.0),
            dict(snr_db=math.nan),
        ],
    )
    def test_bad_values(self, kw):
        with pytest.raises(DataError):
            _config(**kw)

    def test_noiseless_is_legal(self):
        assert _config(snr_db=math.inf).snr_db == math.inf


class TestEndmembers:
    def test_shape_and_peak_normalization(self):
        em = gen_endmembers(4, 32, seed=0)
        assert em.matrix.shape == (32, 4)
        assert np.array_equal(em.matrix.max(axis=0), np.ones(4))
        assert (em.matrix > 0).all()

    @pytest.mark.parametrize("seed", range(5))
    def test_pairwise_separation(self, seed):
        em = gen_endmembers(4, 32, seed=seed)
        cols = em.matrix.T
        for i in range(4):
            for j in range(i + 1, 4):
                assert _angle_deg(cols[i], cols[j]) >= 30.0

    def test_too_many_endmembers(self):
        with pytest.raises(ShapeError):
            gen_endmembers(5, 4)

    def test_standalone_matches_scene(self):
        config = _config(seed=9)
        scene = gen_scene(config)
        alone = gen_endmembers(config.m, config.b, config.seed)
        assert np.array_equal(scene.endmembers.matrix, alone.matrix)


class TestGenScene:
    def test_shapes(self):
        config = _config()
        scene = gen_scene(config)
        assert scene.pair.time1.data.shape == (16, 24, 24)
        assert scene.pair.time2.data.shape == (16, 24, 24)
        assert scene.pair.time1.data.dtype == np.float32
        assert scene.truth.labels.shape == (24, 24)
        assert scene.abundances1.data.shape == (24, 24, 3)
        assert scene.abundances1.kind == "linear"

    def test_bit_reproducible(self):
        a = gen_scene(_config(seed=4))
        b = gen_scene(_config(seed=4))
        assert np.array_equal(a.pair.time1.data, b.pair.time1.data)
        assert np.array_equal(a.pair.time2.data, b.pair.time2.data)
        assert np.array_equal(a.truth.labels, b.truth.labels)
        assert np.array_equal(a.abundances1.data, b.abundances1.data)

    def test_seed_changes_scene(self):
        a = gen_scene(_config(seed=0))
        b = gen_scene(_config(seed=1))
        assert not np.array_equal(a.pair.time1.data, b.pair.time1.data)

    @pytest.mark.parametrize("date", [1, 2])
    def test_abundances_on_simplex(self, date):
        scene = gen_scene(_config())
        w = getattr(scene, f"abundances{date}").data.reshape(-1, 3)
        assert (w >= 0).all()
        assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-9

    def test_every_endmember_has_a_near_pure_pixel(self):
        scene = gen_scene(_config())
        w = scene.abundances1.data.reshape(-1, 3)
        assert (w.max(axis=0) > 0.95).all()

    def test_background_stays_interior(self):
        # mixed pixels never hit the simplex boundary, so estimated
        # abundances stay usable as affinity denominators
        scene = gen_scene(_config())
        w = scene.abundances1.data.reshape(-1, 3)
        assert w.min() > 0.009  # pure patches keep a 0.04 pull

    def test_change_fraction_honored(self):
        for cf in (0.1, 0.2, 0.4):
            scene = gen_scene(_config(height=48, width=48, change_fraction=cf))
            assert abs(scene.truth.labels.mean() - cf) <= 0.03

    def test_noiseless_change_is_exactly_where_truth_says(self):
        scene = gen_scene(_config(snr_db=math.inf))
        d1 = scene.pair.time1.data.reshape(16, -1)
        d2 = scene.pair.time2.data.reshape(16, -1)
        changed = scene.truth.labels.ravel().astype(bool)
        assert np.array_equal(d1[:, ~changed], d2[:, ~changed])
        assert (np.abs(d1[:, changed] - d2[:, changed]).max(axis=0) > 1e-6).all()

    def test_change_converts_to_one_shared_target(self):
        scene = gen_scene(_config())
        w1 = scene.abundances1.data.reshape(-1, 3)
        w2 = scene.abundances2.data.reshape(-1, 3)
        changed = scene.truth.labels.ravel().astype(bool)
        rows = w2[changed]
        assert (rows == rows[0]).all()
        assert rows[0].max() > 0.6  # dominated by one endmember
        # the target is reachable from no time-1 row, so the truth map
        # never marks a pixel whose abundances did not move
        assert (np.abs(w1[changed] - rows[0]).max(axis=1) > 1e-12).all()

    @pytest.mark.parametrize("mixing", ["linear", "bilinear"])
    def test_noiseless_spectra_match_forward_model(self, mixing):
        scene = gen_scene(_config(mixing=mixing, snr_db=math.inf))
        w = scene.abundances1.data.reshape(-1, 3)
        cube = scene.pair.time1.data.reshape(16, -1)
        for p in (0, 100, 333):
            if mixing == "linear":
                expect = scene.endmembers.matrix @ w[p]
            else:
                expect = bfm_forward(scene.endmembers, w[p])
            assert np.allclose(cube[:, p], expect, atol=1e-6)

    def test_bilinear_differs_from_linear(self):
        lin = gen_scene(_config(snr_db=math.inf))
        bil = gen_scene(_config(mixing="bilinear", snr_db=math.inf))
        assert bil.abundances1.kind == "nonlinear"
        assert not np.array_equal(lin.pair.time1.data, bil.pair.time1.data)

    def test_empirical_snr(self):
        config = _config(height=48, width=48, b=32, snr_db=30.0)
        scene = gen_scene(config)
        w = scene.abundances1.data.reshape(-1, 3)
        clean = (w @ scene.endmembers.matrix.T).T
        noisy = scene.pair.time1.data.reshape(32, -1).astype(np.float64)
        snr = 10.0 * math.log10(
            float((clean**2).mean()) / float(((noisy - clean) ** 2).mean())
        )
        assert abs(snr - 30.0) <= 0.5

    def test_unreachable_change_fraction(self):
        # on a 4x4 grid the tolerance band around 8.5 pixels contains no
        # integer pixel count
        config = _config(height=4, width=4, b=8, m=2, change_fraction=0.53125)
        with pytest.raises(ConvergenceError, match="unreachable"):
            gen_scene(config)


class TestSaveScene:
    def test_round_trip(self, tmp_path):
        config = _config(snr_db=25.0)
        scene = gen_scene(config)
        paths = save_scene(scene, config, str(tmp_path))
        assert set(paths) == {"time1", "time2", "truth", "sidecar"}
        back1 = read_envi(paths["time1"])
        back2 = read_envi(paths["time2"])
        assert np.array_equal(back1.data, scene.pair.time1.data)
        assert np.array_equal(back2.data, scene.pair.time2.data)
        truth = read_map(paths["truth"], expected_shape=(24, 24))
        assert np.array_equal(truth.labels, scene.truth.labels)
        with open(paths["sidecar"]) as fh:
            text = fh.read()
        assert "seed = 0" in text
        assert "endmembers" in text
