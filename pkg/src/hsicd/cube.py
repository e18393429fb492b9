"""Hyperspectral cube data model and bit-exact file I/O.

Cubes live in memory as float32 band-sequential arrays of shape
(bands, height, width): all of band 0, then band 1, and so on, row-major
within a band. That matches the dominant on-disk convention; per-pixel
spectral access happens once, when sources are stacked, so no layout wins
everywhere.

Raster I/O speaks the classic header + raw-binary pair format (key = value
text header; bsq/bil/bip interleaves; float32, uint16, or int16 samples).
Ground-truth and change maps are binary PGM (P5).
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, ShapeError, SizeError

# header "data type" codes -> numpy dtypes (little-endian variants; byte
# order field flips them at read time)
_DTYPE_CODES = {2: "i2", 4: "f4", 12: "u2"}
_REQUIRED_KEYS = ("samples", "lines", "bands", "interleave", "data type", "byte order")


def _lock(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, slots=True)
class HyperCube:
    """Single-date hyperspectral image.

    Attributes:
        height, width: spatial size in pixels.
        bands: number of spectral bands.
        data: float32 array of shape (bands, height, width), read-only.
        wavelengths: optional per-band centre wavelengths in nanometres.
    """

    height: int
    width: int
    bands: int
    data: np.ndarray
    wavelengths: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.bands < 1 or self.height < 1 or self.width < 1:
            raise ShapeError(
                f"cube dims must be >= 1, got bands={self.bands} "
                f"height={self.height} width={self.width}"
            )
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.shape != (self.bands, self.height, self.width):
            raise ShapeError(
                f"data shape {data.shape} does not match declared "
                f"(bands, height, width)=({self.bands}, {self.height}, {self.width})"
            )
        if not np.isfinite(data).all():
            idx = int(np.flatnonzero(~np.isfinite(data))[0])
            raise DataError(f"non-finite value at flat index {idx}")
        if self.wavelengths is not None:
            wl = tuple(float(v) for v in self.wavelengths)
            if len(wl) != self.bands:
                raise ShapeError(
                    f"{len(wl)} wavelengths for {self.bands} bands"
                )
            object.__setattr__(self, "wavelengths", wl)
        object.__setattr__(self, "data", _lock(data))

    @classmethod
    def from_array(cls, data: np.ndarray, wavelengths=None) -> "HyperCube":
        """Build a cube from a (bands, height, width) array."""
        data = np.asarray(data)
        if data.ndim != 3:
            raise ShapeError(f"expected 3-D (bands, height, width), got {data.shape}")
        b, h, w = data.shape
        return cls(height=h, width=w, bands=b, data=data, wavelengths=wavelengths)

    def pixels(self) -> np.ndarray:
        """All spectra as an (height*width, bands) view-copy, pixel-major."""
        return self.data.reshape(self.bands, -1).T.copy()


@dataclass(frozen=True, slots=True)
class BinaryMap:
    """Per-pixel changed(1) / unchanged(0) map."""

    height: int
    width: int
    labels: np.ndarray

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if labels.shape != (self.height, self.width):
            raise ShapeError(
                f"labels shape {labels.shape} != ({self.height}, {self.width})"
            )
        bad = (labels > 1).sum()
        if bad:
            raise DataError(f"{bad} labels outside {{0,1}}")
        object.__setattr__(self, "labels", _lock(labels))

    @classmethod
    def from_array(cls, labels: np.ndarray) -> "BinaryMap":
        labels = np.asarray(labels)
        if labels.ndim != 2:
            raise ShapeError(f"expected 2-D labels, got {labels.shape}")
        return cls(height=labels.shape[0], width=labels.shape[1], labels=labels)


@dataclass(frozen=True, slots=True)
class CubePair:
    """Co-registered cubes of the same scene at two dates."""

    time1: HyperCube
    time2: HyperCube

    def __post_init__(self):
        a, b = self.time1, self.time2
        if (a.height, a.width, a.bands) != (b.height, b.width, b.bands):
            raise ShapeError(
                f"cube geometry mismatch: ({a.bands},{a.height},{a.width}) vs "
                f"({b.bands},{b.height},{b.width})"
            )
        if a.wavelengths != b.wavelengths:
            raise ShapeError("wavelength lists differ between dates")

    @property
    def height(self) -> int:
        return self.time1.height

    @property
    def width(self) -> int:
        return self.time1.width

    @property
    def bands(self) -> int:
        return self.time1.bands


def _parse_header(text: str, path: str) -> dict:
    """Parse `key = value` header text; {}-bracketed values may span lines."""
    body = text
    if body.lstrip().lower().startswith("envi"):
        body = body.lstrip()[4:]
    fields: dict[str, str] = {}
    # stitch multi-line { ... } groups into single logical lines
    logical: list[str] = []
    pending = ""
    for raw in body.splitlines():
        line = raw.strip()
        if not line or line.startswith(";"):
            continue
        if pending:
            pending += " " + line
            if "}" in line:
                logical.append(pending)
                pending = ""
            continue
        if "{" in line and "}" not in line:
            pending = line
        else:
            logical.append(line)
    if pending:
        raise FormatError(f"{path}: unterminated '{{' group in header")
    for line in logical:
        if "=" not in line:
            continue
        key, val = line.split("=", 1)
        fields[key.strip().lower()] = val.strip()
    return fields


def _parse_int(fields: dict, key: str, path: str) -> int:
    if key not in fields:
        raise FormatError(f"{path}: missing header field '{key}'")
    try:
        return int(fields[key])
    except ValueError:
        raise FormatError(
            f"{path}: header field '{key}' is not an integer: {fields[key]!r}"
        ) from None


def read_envi(header_path: str) -> HyperCube:
    """Read a header + raw pair into canonical band-sequential float32.

    The raw file is the header path with its `.hdr` suffix stripped. Integer
    sample types are converted to float without scaling. Any source
    interleave (bsq, bil, bip) canonicalizes to the in-memory bsq layout.
    """
    if not os.path.exists(header_path):
        raise FormatError(f"header not found: {header_path}")
    raw_path = re.sub(r"\.hdr$", "", header_path, flags=re.IGNORECASE)
    if raw_path == header_path or not os.path.exists(raw_path):
        raise FormatError(f"raw companion of {header_path} not found")
    with open(header_path, "r") as fh:
        fields = _parse_header(fh.read(), header_path)

    for key in _REQUIRED_KEYS:
        if key not in fields:
            raise FormatError(f"{header_path}: missing header field '{key}'")
    samples = _parse_int(fields, "samples", header_path)
    lines = _parse_int(fields, "lines", header_path)
    bands = _parse_int(fields, "bands", header_path)
    dtype_code = _parse_int(fields, "data type", header_path)
    byte_order = _parse_int(fields, "byte order", header_path)
    interleave = fields["interleave"].lower()
    if dtype_code not in _DTYPE_CODES:
        raise FormatError(
            f"{header_path}: unsupported data type code {dtype_code} "
            f"(supported: {sorted(_DTYPE_CODES)})"
        )
    if interleave not in ("bsq", "bil", "bip"):
        raise FormatError(f"{header_path}: unsupported interleave {interleave!r}")
    if byte_order not in (0, 1):
        raise FormatError(f"{header_path}: byte order must be 0 or 1")

    dtype = np.dtype(("<" if byte_order == 0 else ">") + _DTYPE_CODES[dtype_code])
    expected = samples * lines * bands * dtype.itemsize
    actual = os.path.getsize(raw_path)
    if actual != expected:
        raise SizeError(
            f"{raw_path}: expected {expected} bytes "
            f"({bands}x{lines}x{samples} @ {dtype.itemsize}B), found {actual}"
        )
    flat = np.fromfile(raw_path, dtype=dtype)
    if interleave == "bsq":
        data = flat.reshape(bands, lines, samples)
    elif interleave == "bil":
        data = flat.reshape(lines, bands, samples).transpose(1, 0, 2)
    else:  # bip
        data = flat.reshape(lines, samples, bands).transpose(2, 0, 1)
    data = np.ascontiguousarray(data, dtype=np.float32)
    if not np.isfinite(data).all():
        idx = int(np.flatnonzero(~np.isfinite(data))[0])
        raise DataError(f"{raw_path}: non-finite value at canonical flat index {idx}")

    wavelengths = None
    if "wavelength" in fields:
        group = fields["wavelength"]
        if not (group.startswith("{") and group.endswith("}")):
            raise FormatError(f"{header_path}: wavelength field must be {{...}}")
        try:
            wavelengths = tuple(
                float(tok) for tok in group[1:-1].split(",") if tok.strip()
            )
        except ValueError:
            raise FormatError(f"{header_path}: non-numeric wavelength entry") from None
        if len(wavelengths) != bands:
            raise FormatError(
                f"{header_path}: {len(wavelengths)} wavelengths for {bands} bands"
            )
    return HyperCube(
        height=lines, width=samples, bands=bands, data=data, wavelengths=wavelengths
    )


def write_envi(cube: HyperCube, path: str) -> None:
    """Write `path` (raw, bsq float32 little-endian) and `path.hdr`."""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    lines = [
        "samples = %d" % cube.width,
        "lines = %d" % cube.height,
        "bands = %d" % cube.bands,
        "interleave = bsq",
        "data type = 4",
        "byte order = 0",
    ]
    if cube.wavelengths is not None:
        lines.append(
            "wavelength = { " + ", ".join("%g" % w for w in cube.wavelengths) + " }"
        )
    with open(path + ".hdr", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    cube.data.astype("<f4").tofile(path)


def read_map(path: str, expected_shape: tuple[int, int] | None = None) -> BinaryMap:
    """Read a binary PGM (P5) map; sample values >= 128 become label 1."""
    if not os.path.exists(path):
        raise FormatError(f"map not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens: list[bytes] = []
    pos = 0
    # P5 header = 4 whitespace-separated tokens, '#' comments allowed
    while len(tokens) < 4 and pos < len(blob):
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise FormatError(f"{path}: non-numeric PGM header token") from None
    if maxval <= 0 or maxval > 255:
        raise FormatError(f"{path}: unsupported PGM maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    pixels = np.frombuffer(blob, dtype=np.uint8, offset=pos)
    if pixels.size != height * width:
        raise SizeError(
            f"{path}: expected {height * width} pixel bytes, found {pixels.size}"
        )
    if expected_shape is not None and (height, width) != tuple(expected_shape):
        raise ShapeError(
            f"{path}: map is {height}x{width}, expected "
            f"{expected_shape[0]}x{expected_shape[1]}"
        )
    labels = (pixels.reshape(height, width) >= 128).astype(np.uint8)
    return BinaryMap(height=height, width=width, labels=labels)


def write_map(bmap: BinaryMap, path: str) -> None:
    """Write a binary PGM (P5); label 1 -> 255, label 0 -> 0."""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (bmap.width, bmap.height))
        fh.write((bmap.labels * np.uint8(255)).tobytes())


def normalize_pair(pair: CubePair) -> CubePair:
    """Scale both cubes by their single joint max |value|.

    Joint (not per-cube) scaling preserves cross-date ratios, which the
    affinity construction divides directly. An all-zero pair is returned
    unchanged. Idempotent: the joint max of the output is exactly 1.
    """
    peak = max(
        float(np.abs(pair.time1.data).max()), float(np.abs(pair.time2.data).max())
    )
    if peak == 0.0:
        return pair
    scale = np.float32(peak)
    out = []
    for cube in (pair.time1, pair.time2):
        out.append(
            HyperCube(
                height=cube.height,
                width=cube.width,
                bands=cube.bands,
                data=cube.data / scale,
                wavelengths=cube.wavelengths,
            )
        )
    return CubePair(time1=out[0], time2=out[1])


def select_bands(cube: HyperCube, keep) -> HyperCube:
    """Keep only the listed band indices (strictly increasing)."""
    keep = [int(k) for k in keep]
    if not keep:
        raise DataError("band keep-list is empty")
    for prev, cur in zip(keep, keep[1:]):
        if cur <= prev:
            raise DataError(f"band indices must be strictly increasing, got {keep}")
    if keep[0] < 0 or keep[-1] >= cube.bands:
        raise DataError(
            f"band index out of range 0..{cube.bands - 1}: {keep}"
        )
    wl = None
    if cube.wavelengths is not None:
        wl = tuple(cube.wavelengths[k] for k in keep)
    return HyperCube(
        height=cube.height,
        width=cube.width,
        bands=len(keep),
        data=cube.data[keep],
        wavelengths=wl,
    )
