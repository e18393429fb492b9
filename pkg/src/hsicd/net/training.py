"""Adagrad training loop over pseudo-labeled affinity matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError, DivergenceError, ShapeError
from .model import Network


@dataclass(frozen=True, slots=True)
class TrainConfig:
    batch_size: int = 96
    learning_rate: float = 1e-4
    adagrad_eps: float = 1e-8
    steps: int = 30000
    seed: int = 0
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        for name in (
            "batch_size",
            "learning_rate",
            "adagrad_eps",
            "steps",
            "bn_momentum",
            "bn_eps",
        ):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive, got {getattr(self, name)}")


def init_adagrad(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Zeroed squared-gradient accumulators, one per parameter tensor."""
    return {k: np.zeros_like(v) for k, v in params.items()}


def adagrad_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict[str, np.ndarray],
    lr: float,
    eps: float,
) -> None:
    """In-place update: acc += g^2; p -= lr * g / (sqrt(acc) + eps)."""
    if set(params) != set(state) or not set(grads) <= set(params):
        raise ShapeError("parameter/gradient/state key sets disagree")
    for key, g in grads.items():
        acc = state[key]
        acc += g * g
        params[key] -= lr * g / (np.sqrt(acc) + eps)


def train(net: Network, samples, affinity_source, config: TrainConfig):
    """Run `config.steps` Adagrad steps on batches drawn from the sample set.

    Batches of `batch_size` are drawn uniformly with replacement (seeded).
    `affinity_source` is called once with all sample pixel indices and must
    return the matching (S, n, n) affinity matrices; batches then gather
    rows from that block. The loss trace records (step, loss) at step 0,
    every 100th step, and the final step.

    Returns:
        (trace, adagrad_state); `net` is trained in place.

    Raises:
        DivergenceError: non-finite loss. Carries the failing step index and
            a `.snapshot` of the parameters from the last trace point.
    """
    pairs = list(samples.samples)
    if not pairs:
        raise DataError("empty sample set")
    if samples.negatives != 2 * samples.positives:
        raise DataError("sample set does not honor the 1:2 ratio")
    idx = np.array([i for i, _ in pairs], dtype=np.int64)
    labels = np.array([lab for _, lab in pairs], dtype=np.int64)
    matrices = np.ascontiguousarray(affinity_source(idx), dtype=net.dtype)
    if matrices.shape != (idx.size, net.n, net.n):
        raise ShapeError(
            f"affinity source returned {matrices.shape}, expected "
            f"({idx.size}, {net.n}, {net.n})"
        )

    rng = np.random.default_rng(config.seed)
    state = init_adagrad(net.params)
    trace: list[tuple[int, float]] = []
    snapshot = {k: v.copy() for k, v in net.params.items()}
    snapshot_step = -1
    for step in range(config.steps):
        pick = rng.integers(0, idx.size, size=config.batch_size)
        loss, grads = net.loss_and_grads(matrices[pick], labels[pick])
        if not np.isfinite(loss):
            err = DivergenceError(
                f"non-finite loss {loss!r} at step {step} "
                f"(last finite snapshot: step {snapshot_step})",
                step=step,
            )
            err.snapshot = snapshot
            err.snapshot_step = snapshot_step
            raise err
        if step % 100 == 0 or step == config.steps - 1:
            trace.append((step, loss))
            snapshot = {k: v.copy() for k, v in net.params.items()}
            snapshot_step = step
        adagrad_step(
            net.params, grads, state, config.learning_rate, config.adagrad_eps
        )
    return trace, state


def save_trace(trace, path: str) -> None:
    """Write the loss trace as `step,loss` CSV."""
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for step, loss in trace:
            fh.write(f"{step},{loss:.9g}\n")
