"""Training loop: separable-problem sanity, determinism, trace cadence,
divergence capture, and the loop's own input validation."""

from types import SimpleNamespace

import numpy as np
import pytest

from hsicd.errors import DataError, DivergenceError, ShapeError
from hsicd.net.model import Network
from hsicd.net.training import TrainConfig, save_trace, train
from hsicd.predetect import LabeledSampleSet

B, M = 12, 2
N = B + 2 * M


def _toy_problem(n_pos=6, seed=0):
    """Separable synthetic affinities: positives carry a flipped corner block.

    Returns (sample_set, matrices) with matrices indexed by sample pixel
    index, mimicking a per-pixel affinity source.
    """
    rng = np.random.default_rng(seed)
    total = 3 * n_pos
    base = np.eye(N, dtype=np.float32)
    matrices = np.empty((total, N, N), dtype=np.float32)
    labels = np.array([1] * n_pos + [0] * (2 * n_pos))
    for i, lab in enumerate(labels):
        mat = base + 0.05 * rng.standard_normal((N, N)).astype(np.float32)
        if lab:
            mat[:4, :4] -= 1.0
        matrices[i] = mat
    samples = tuple((i, int(lab)) for i, lab in enumerate(labels))
    sample_set = LabeledSampleSet(
        samples=samples, seed=seed, positives=n_pos, negatives=2 * n_pos
    )
    return sample_set, matrices


def _source(matrices):
    return lambda idx: matrices[np.asarray(idx)]


class TestTrain:
    def test_learns_a_separable_problem(self):
        sample_set, matrices = _toy_problem()
        net = Network(b=B, m=M, seed=0)
        config = TrainConfig(batch_size=9, learning_rate=5e-3, steps=300, seed=0)
        trace, state = train(net, sample_set, _source(matrices), config)
        pred = net.predict(matrices)
        truth = np.array([lab for _, lab in sample_set.samples])
        assert (pred == truth).mean() >= 0.99
        assert trace[-1][1] < trace[0][1]

    def test_same_seed_is_bit_reproducible(self):
        sample_set, matrices = _toy_problem()
        config = TrainConfig(batch_size=6, learning_rate=1e-3, steps=120, seed=5)
        runs = []
        for _ in range(2):
            net = Network(b=B, m=M, seed=2)
            trace, state = train(net, sample_set, _source(matrices), config)
            runs.append((trace, net.params, state))
        assert runs[0][0] == runs[1][0]
        for key in runs[0][1]:
            assert np.array_equal(runs[0][1][key], runs[1][1][key])
            assert np.array_equal(runs[0][2][key], runs[1][2][key])

    def test_trace_cadence(self):
        sample_set, matrices = _toy_problem()
        config = TrainConfig(batch_size=6, learning_rate=1e-6, steps=250, seed=0)
        net = Network(b=B, m=M, seed=0)
        trace, _ = train(net, sample_set, _source(matrices), config)
        assert [step for step, _ in trace] == [0, 100, 200, 249]
        assert all(np.isfinite(loss) for _, loss in trace)

    def test_state_covers_every_parameter(self):
        sample_set, matrices = _toy_problem()
        config = TrainConfig(batch_size=6, learning_rate=1e-4, steps=3, seed=0)
        net = Network(b=B, m=M, seed=0)
        _, state = train(net, sample_set, _source(matrices), config)
        assert set(state) == set(net.params)
        assert state["fc2.W"].max() > 0

    def test_affinity_source_called_once_with_all_indices(self):
        sample_set, matrices = _toy_problem()
        calls = []

        def source(idx):
            calls.append(np.asarray(idx).copy())
            return matrices[np.asarray(idx)]

        net = Network(b=B, m=M, seed=0)
        config = TrainConfig(batch_size=6, learning_rate=1e-4, steps=2, seed=0)
        train(net, sample_set, source, config)
        assert len(calls) == 1
        assert np.array_equal(calls[0], [i for i, _ in sample_set.samples])

    def test_divergence_carries_snapshot(self):
        sample_set, matrices = _toy_problem()
        poisoned = np.full_like(matrices, np.nan)
        net = Network(b=B, m=M, seed=0)
        init = {k: v.copy() for k, v in net.params.items()}
        config = TrainConfig(batch_size=6, learning_rate=1e-4, steps=50, seed=0)
        with pytest.raises(DivergenceError) as exc:
            train(net, sample_set, _source(poisoned), config)
        err = exc.value
        assert err.step == 0
        assert err.snapshot_step == -1  # no trace point survived
        assert set(err.snapshot) == set(init)
        for key in init:
            assert np.array_equal(err.snapshot[key], init[key])

    def test_empty_sample_set_rejected(self):
        net = Network(b=B, m=M, seed=0)
        empty = SimpleNamespace(samples=(), positives=0, negatives=0)
        with pytest.raises(DataError, match="empty"):
            train(net, empty, _source(np.zeros((1, N, N))), TrainConfig(steps=1))

    def test_ratio_violation_rejected(self):
        # bypasses the sample-set constructor to exercise the loop's own guard
        net = Network(b=B, m=M, seed=0)
        bad = SimpleNamespace(samples=((0, 1), (1, 0)), positives=1, negatives=1)
        with pytest.raises(DataError, match="1:2"):
            train(net, bad, _source(np.zeros((2, N, N))), TrainConfig(steps=1))

    def test_wrong_source_shape_rejected(self):
        sample_set, matrices = _toy_problem()
        net = Network(b=B, m=M, seed=0)
        with pytest.raises(ShapeError, match="affinity source"):
            train(
                net,
                sample_set,
                lambda idx: matrices[np.asarray(idx)][:, :-1, :],
                TrainConfig(steps=1),
            )


class TestTrainConfig:
    @pytest.mark.parametrize(
        "field,value",
        [
            ("batch_size", 0),
            ("learning_rate", 0.0),
            ("learning_rate", -1e-4),
            ("adagrad_eps", 0.0),
            ("steps", 0),
            ("bn_momentum", -0.1),
            ("bn_eps", 0.0),
        ],
    )
    def test_positivity(self, field, value):
        with pytest.raises(DataError, match=field):
            TrainConfig(**{field: value})

    def test_defaults_match_documented_run_settings(self):
        config = TrainConfig()
        assert config.batch_size == 96
        assert config.learning_rate == 1e-4
        assert config.steps == 30000
        assert config.adagrad_eps == 1e-8


class TestSaveTrace:
    def test_csv_format(self, tmp_path):
        path = str(tmp_path / "trace.csv")
        save_trace([(0, 0.6931471805), (100, 0.25)], path)
        with open(path) as fh:
            lines = fh.read().splitlines()
        assert lines[0] == "step,loss"
        assert lines[1] == "0,0.693147181"
        assert lines[2] == "100,0.25"
