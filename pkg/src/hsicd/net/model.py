"""Network definition: four two-bank conv blocks, then two FC layers.

Fixed architecture (input is one n x n affinity matrix per sample, n = b + 2m):

    block k (k = 1..4): lsconv (channels 32/64/128/96, kernels 5/3/3/1,
                        same padding) -> batch norm -> tanh -> 2x2 max pool
    head:               flatten -> FC 512 -> batch norm -> tanh -> FC 2

The spectral kernel bank applies inside the top-left square of the input to
each conv block; that square starts at b x b (the spectral-affinity region)
and shrinks with every pooling stage as ceil(b / 2^p), clamped to the layer's
spatial size. Everything downstream of the affinity matrices is plain
float32 numpy (float64 in gradient-check mode).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from . import ops

CHANNELS = (32, 64, 128, 96)
KERNELS = (5, 3, 3, 1)
FC1_UNITS = 512
N_CLASSES = 2
N_POOLS = 4
MIN_INPUT = 16  # four 2x2 pools must leave at least one cell


@dataclass(frozen=True, slots=True)
class RegionMaskSet:
    """Per-conv-layer spectral-bank masks and their square extents."""

    b: int
    m: int
    sizes: tuple[int, ...]
    extents: tuple[int, ...]
    masks: tuple[np.ndarray, ...]


def derive_region_masks(b: int, m: int) -> RegionMaskSet:
    """Spectral-bank geometry for every conv layer.

    Layer k sees input of size floor(n / 2^p) with p pools before it, and its
    spectral square spans ceil(b / 2^p) cells, clamped to the layer size.
    The cross-source rows and columns (the zeroed region) fall to the
    abundance bank, which is safe precisely because they are zero.
    """
    n = b + 2 * m
    if b < 1 or m < 1:
        raise ShapeError(f"need b >= 1 and m >= 1, got b={b} m={m}")
    if n < MIN_INPUT:
        raise ShapeError(f"input size n=b+2m={n} must be >= {MIN_INPUT}")
    sizes = []
    extents = []
    masks = []
    size = n
    for p in range(len(CHANNELS)):
        extent = min(-(-b // (2 ** p)), size)  # ceil division, clamped
        mask = np.zeros((size, size), dtype=bool)
        mask[:extent, :extent] = True
        mask.flags.writeable = False
        sizes.append(size)
        extents.append(extent)
        masks.append(mask)
        size //= 2
    return RegionMaskSet(
        b=b, m=m, sizes=tuple(sizes), extents=tuple(extents), masks=tuple(masks)
    )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


class Network:
    """Parameter container plus forward/backward for the fixed architecture.

    Attributes:
        params: dict of name -> ndarray, the trainable tensors.
        bn_states: dict of layer name -> ops.BNState (running statistics).
        masks: RegionMaskSet for (b, m).
    """

    def __init__(
        self,
        b: int,
        m: int,
        seed: int = 0,
        dtype=np.float32,
        bn_momentum: float = 0.9,
        bn_eps: float = 1e-5,
    ):
        self.b = int(b)
        self.m = int(m)
        self.n = self.b + 2 * self.m
        self.dtype = np.dtype(dtype)
        self.masks = derive_region_masks(self.b, self.m)
        self.flat_dim = (self.masks.sizes[-1] // 2) ** 2 * CHANNELS[-1]

        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        bn_states: dict[str, ops.BNState] = {}
        cin = 1
        for li, (cout, k) in enumerate(zip(CHANNELS, KERNELS), start=1):
            rows = k * k * cin
            fan_in, fan_out = rows, k * k * cout
            params[f"conv{li}.Ws"] = _glorot(
                rng, fan_in, fan_out, (rows, cout), self.dtype
            )
            params[f"conv{li}.Wa"] = _glorot(
                rng, fan_in, fan_out, (rows, cout), self.dtype
            )
            params[f"conv{li}.bias"] = np.zeros(cout, self.dtype)
            params[f"conv{li}.gamma"] = np.ones(cout, self.dtype)
            params[f"conv{li}.beta"] = np.zeros(cout, self.dtype)
            bn_states[f"conv{li}"] = ops.BNState.create(
                cout, self.dtype, bn_momentum, bn_eps
            )
            cin = cout
        params["fc1.W"] = _glorot(
            rng, self.flat_dim, FC1_UNITS, (self.flat_dim, FC1_UNITS), self.dtype
        )
        params["fc1.b"] = np.zeros(FC1_UNITS, self.dtype)
        params["fc1.gamma"] = np.ones(FC1_UNITS, self.dtype)
        params["fc1.beta"] = np.zeros(FC1_UNITS, self.dtype)
        bn_states["fc1"] = ops.BNState.create(
            FC1_UNITS, self.dtype, bn_momentum, bn_eps
        )
        params["fc2.W"] = _glorot(
            rng, FC1_UNITS, N_CLASSES, (FC1_UNITS, N_CLASSES), self.dtype
        )
        params["fc2.b"] = np.zeros(N_CLASSES, self.dtype)
        self.params = params
        self.bn_states = bn_states

    # -- forward ----------------------------------------------------------

    def forward(
        self,
        x: np.ndarray,
        mode: str = "eval",
        want_caches: bool = False,
        update_stats: bool = True,
    ):
        """Logits for a batch of affinity matrices.

        Args:
            x: (batch, n, n) array.
            mode: "train" uses batch statistics in the norm layers (batch
                must be >= 2); "eval" uses running statistics.
            want_caches: also return the per-layer caches backward needs.
            update_stats: set False to keep running statistics untouched in
                train mode (pure-function forward for gradient checking).
        """
        x = np.asarray(x)
        if x.ndim != 3 or x.shape[1] != self.n or x.shape[2] != self.n:
            raise ShapeError(
                f"expected (batch, {self.n}, {self.n}) input, got {x.shape}"
            )
        h = np.ascontiguousarray(x, self.dtype)[:, :, :, None]
        p = self.params
        caches = []
        for li in range(1, len(CHANNELS) + 1):
            key = f"conv{li}"
            state = self.bn_states[key]
            if mode == "train" and not update_stats:
                state = ops.BNState(
                    running_mean=state.running_mean,
                    running_var=state.running_var,
                    momentum=state.momentum,
                    eps=state.eps,
                    updates=state.updates,
                )
            z, conv_cache = ops.lsconv_forward(
                h,
                p[f"{key}.Ws"],
                p[f"{key}.Wa"],
                p[f"{key}.bias"],
                self.masks.masks[li - 1],
            )
            zn, bn_cache = ops.batchnorm_forward(
                z, p[f"{key}.gamma"], p[f"{key}.beta"], state, mode
            )
            act, _ = ops.tanh_forward(zn)
            h, pool_cache = ops.maxpool2_forward(act)
            caches.append((conv_cache, bn_cache, act, pool_cache))

        flat = h.reshape(h.shape[0], -1)
        z1, fc1_cache = ops.fc_forward(flat, p["fc1.W"], p["fc1.b"])
        state = self.bn_states["fc1"]
        if mode == "train" and not update_stats:
            state = ops.BNState(
                running_mean=state.running_mean,
                running_var=state.running_var,
                momentum=state.momentum,
                eps=state.eps,
                updates=state.updates,
            )
        z1n, bnf_cache = ops.batchnorm_forward(
            z1, p["fc1.gamma"], p["fc1.beta"], state, mode
        )
        a1, _ = ops.tanh_forward(z1n)
        logits, fc2_cache = ops.fc_forward(a1, p["fc2.W"], p["fc2.b"])
        if not want_caches:
            return logits
        head = (h.shape, flat, fc1_cache, bnf_cache, a1, fc2_cache)
        return logits, (caches, head)

    # -- backward ---------------------------------------------------------

    def backward(self, dlogits: np.ndarray, caches) -> dict[str, np.ndarray]:
        """Parameter gradients for a forward pass captured with caches."""
        conv_caches, head = caches
        h_shape, flat, fc1_cache, bnf_cache, a1, fc2_cache = head
        grads: dict[str, np.ndarray] = {}

        da1, grads["fc2.W"], grads["fc2.b"] = ops.fc_backward(dlogits, fc2_cache)
        dz1, grads["fc1.gamma"], grads["fc1.beta"] = ops.tanh_bn_backward(
            da1, a1, bnf_cache
        )
        dflat, grads["fc1.W"], grads["fc1.b"] = ops.fc_backward(dz1, fc1_cache)
        dh = dflat.reshape(h_shape)

        for li in range(len(CHANNELS), 0, -1):
            key = f"conv{li}"
            conv_cache, bn_cache, act, pool_cache = conv_caches[li - 1]
            dact = ops.maxpool2_backward(dh, pool_cache)
            dz, grads[f"{key}.gamma"], grads[f"{key}.beta"] = ops.tanh_bn_backward(
                dact, act, bn_cache
            )
            dh, dws, dwa, dbias = ops.lsconv_backward(dz, conv_cache, need_dx=li > 1)
            grads[f"{key}.Ws"] = dws
            grads[f"{key}.Wa"] = dwa
            grads[f"{key}.bias"] = dbias
        return grads

    def loss_and_grads(self, x, labels, update_stats: bool = True):
        """Train-mode forward + softmax cross-entropy + full backward."""
        logits, caches = self.forward(
            x, mode="train", want_caches=True, update_stats=update_stats
        )
        loss, dlogits = ops.softmax_cross_entropy(logits, labels)
        grads = self.backward(dlogits, caches)
        return loss, grads

    def predict(self, x) -> np.ndarray:
        """Class labels in eval mode; exact logit ties resolve to class 0."""
        logits = self.forward(x, mode="eval")
        return (logits[:, 1] > logits[:, 0]).astype(np.uint8)
