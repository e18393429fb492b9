"""Central-difference gradient verification helpers.

All checks run in float64. The error metric is

    err = |analytic - numeric| / max(|analytic|, |numeric|, 1.0)

i.e. relative wherever gradients dominate the loss scale, absolute below
it. The floor matters: through the full network the finite-difference
noise floor is ~1e-7 absolute (rounding in f(x+h)-f(x-h) amplified by
1/2h), and some true gradients are exactly zero (a constant shift of a
conv bias is removed by the batch statistics of the following
normalization), so a pure ratio would report noise as error there.
"""

from __future__ import annotations

import numpy as np

from .model import Network

REL_FLOOR = 1.0


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    return float((np.abs(a - n) / denom).max())


def numeric_grad(
    f, x: np.ndarray, h: float = 1e-6, coords=None
) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar f at the given flat coords of x.

    Mutates entries of x in place while probing and restores them. Returns
    (coords, gradient values at those coords); coords=None probes all.
    """
    flat = x.reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    coords = np.asarray(coords, dtype=np.int64)
    out = np.empty(coords.size, dtype=np.float64)
    for pos, c in enumerate(coords):
        keep = flat[c]
        flat[c] = keep + h
        fp = f()
        flat[c] = keep - h
        fm = f()
        flat[c] = keep
        out[pos] = (fp - fm) / (2.0 * h)
    return coords, out


def check_network(
    b: int,
    m: int,
    batch: int = 2,
    seed: int = 0,
    coords_per_tensor: int | None = 20,
    h: float = 1e-6,
) -> float:
    """Max gradient error over every parameter of a float64 network.

    Probes `coords_per_tensor` seeded random coordinates per tensor (all
    coordinates when None). The loss is softmax cross-entropy on a random
    batch, evaluated in train mode with running-statistic updates disabled
    so the loss is a pure function of the parameters.
    """
    rng = np.random.default_rng(seed)
    net = Network(b=b, m=m, seed=seed, dtype=np.float64)
    x = rng.standard_normal((batch, net.n, net.n))
    labels = rng.integers(0, 2, size=batch)

    def loss_fn() -> float:
        logits = net.forward(x, mode="train", update_stats=False)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return float(-logp[np.arange(batch), labels].mean())

    _, grads = net.loss_and_grads(x, labels, update_stats=False)
    worst = 0.0
    for key in sorted(net.params):
        tensor = net.params[key]
        if coords_per_tensor is None or tensor.size <= coords_per_tensor:
            coords = None
        else:
            coords = rng.choice(tensor.size, size=coords_per_tensor, replace=False)
        coords, numeric = numeric_grad(loss_fn, tensor, h=h, coords=coords)
        analytic = grads[key].reshape(-1)[coords]
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst
