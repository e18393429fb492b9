"""Network + optimizer checkpointing.

A checkpoint is a pair of files: `<base>.manifest`, versioned key = value
text recording the geometry, precision, and an ordered block list; and
`<base>.bin`, the blocks' raw little-endian bytes concatenated in manifest
order. Loading validates the version, every declared shape, and the exact
payload size, and reproduces arrays bit-identically.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import FormatError, ShapeError, SizeError
from .model import CHANNELS, FC1_UNITS, KERNELS, N_CLASSES, Network

FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def _blocks(net: Network, state: dict | None):
    """Ordered (name, array) pairs covering params, BN stats, optimizer."""
    for key, val in net.params.items():
        yield key, val
    for key, bn in net.bn_states.items():
        yield f"bn.{key}.running_mean", bn.running_mean
        yield f"bn.{key}.running_var", bn.running_var
        yield f"bn.{key}.updates", np.array([bn.updates], dtype=np.int64)
    if state is not None:
        for key, val in state.items():
            yield f"opt.{key}", val


def save_checkpoint(net: Network, state: dict | None, base: str) -> None:
    """Write `<base>.manifest` and `<base>.bin`."""
    parent = os.path.dirname(os.path.abspath(base))
    os.makedirs(parent, exist_ok=True)
    lines = [
        f"format_version = {FORMAT_VERSION}",
        f"b = {net.b}",
        f"m = {net.m}",
        f"n = {net.n}",
        f"dtype = {net.dtype.name}",
        "channels = " + ",".join(str(c) for c in CHANNELS),
        "kernels = " + ",".join(str(k) for k in KERNELS),
        f"fc1_units = {FC1_UNITS}",
        f"classes = {N_CLASSES}",
        f"bn_momentum = {next(iter(net.bn_states.values())).momentum!r}",
        f"bn_eps = {next(iter(net.bn_states.values())).eps!r}",
        f"has_optimizer = {int(state is not None)}",
    ]
    payload = bytearray()
    for name, arr in _blocks(net, state):
        dtype = _DTYPES[arr.dtype.name]
        shape = "x".join(str(d) for d in arr.shape)
        lines.append(f"block = {name} {arr.dtype.name} {shape}")
        payload += np.ascontiguousarray(arr).astype(dtype).tobytes()
    with open(base + ".manifest", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(base + ".bin", "wb") as fh:
        fh.write(bytes(payload))


def load_checkpoint(base: str):
    """Rebuild (net, adagrad_state_or_None) from a checkpoint pair."""
    manifest_path = base + ".manifest"
    if not os.path.exists(manifest_path):
        raise FormatError(f"manifest not found: {manifest_path}")
    fields: dict[str, str] = {}
    blocks: list[tuple[str, str, tuple[int, ...]]] = []
    with open(manifest_path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or "=" not in line:
                continue
            key, val = (part.strip() for part in line.split("=", 1))
            if key == "block":
                try:
                    name, dtype_name, shape_s = val.split()
                    shape = tuple(int(d) for d in shape_s.split("x") if d)
                except ValueError:
                    raise FormatError(
                        f"{manifest_path}: bad block line {line!r}"
                    ) from None
                blocks.append((name, dtype_name, shape))
            else:
                fields[key] = val

    try:
        version = int(fields["format_version"])
    except (KeyError, ValueError):
        raise FormatError(f"{manifest_path}: missing/garbled format_version") from None
    if version != FORMAT_VERSION:
        raise FormatError(
            f"{manifest_path}: format_version {version} unsupported "
            f"(this build reads {FORMAT_VERSION})"
        )
    try:
        b = int(fields["b"])
        m = int(fields["m"])
        n = int(fields["n"])
        dtype = np.dtype(fields["dtype"])
        momentum = float(fields["bn_momentum"])
        eps = float(fields["bn_eps"])
        has_opt = bool(int(fields["has_optimizer"]))
    except (KeyError, ValueError):
        raise FormatError(f"{manifest_path}: missing/garbled geometry field") from None
    if n != b + 2 * m:
        raise ShapeError(f"{manifest_path}: n={n} inconsistent with b+2m={b + 2 * m}")
    declared_channels = tuple(int(c) for c in fields.get("channels", "").split(","))
    declared_kernels = tuple(int(k) for k in fields.get("kernels", "").split(","))
    if declared_channels != CHANNELS or declared_kernels != KERNELS:
        raise FormatError(
            f"{manifest_path}: architecture {declared_channels}/{declared_kernels} "
            f"does not match this build {CHANNELS}/{KERNELS}"
        )

    net = Network(b=b, m=m, dtype=dtype, bn_momentum=momentum, bn_eps=eps)
    state = {k: np.zeros_like(v) for k, v in net.params.items()} if has_opt else None
    expected = dict(_blocks(net, state))
    if [name for name, _, _ in blocks] != list(expected):
        raise FormatError(f"{manifest_path}: block list does not match architecture")

    with open(base + ".bin", "rb") as fh:
        payload = fh.read()
    offset = 0
    loaded: dict[str, np.ndarray] = {}
    for name, dtype_name, shape in blocks:
        if expected[name].shape != shape:
            raise ShapeError(
                f"{manifest_path}: block {name} declared {shape}, "
                f"architecture expects {expected[name].shape}"
            )
        if dtype_name not in _DTYPES:
            raise FormatError(f"{manifest_path}: unknown block dtype {dtype_name}")
        dt = np.dtype(_DTYPES[dtype_name])
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(payload):
            raise SizeError(
                f"{base}.bin: payload exhausted at block {name} "
                f"(need {nbytes} more bytes, have {len(payload) - offset})"
            )
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=offset)
        offset += nbytes
        loaded[name] = arr.reshape(shape).astype(dtype_name, copy=True)
    if offset != len(payload):
        raise SizeError(
            f"{base}.bin: {len(payload) - offset} trailing bytes after last block"
        )

    for key in net.params:
        net.params[key] = loaded[key]
    for key, bn in net.bn_states.items():
        bn.running_mean = loaded[f"bn.{key}.running_mean"]
        bn.running_var = loaded[f"bn.{key}.running_var"]
        bn.updates = int(loaded[f"bn.{key}.updates"][0])
    if has_opt:
        for key in state:
            state[key] = loaded[f"opt.{key}"]
    return net, state
