"""Empirical priors as finite atom clouds, synthetic generators, image-grid
block averaging, IDX ingestion and binary persistence.

An :class:`EmpiricalPrior` represents the clean-data law as a uniform mixture
of point masses ("atoms") in R^d.  Finite point sets in d >= 3 are never hit
by a Brownian path started elsewhere, which is exactly the property the
backward sampler relies on.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CorruptHeaderError,
    DimensionMismatchError,
    InvalidParameterError,
    MalformedMagicError,
    PriorFormatError,
    TruncatedFileError,
    UnsupportedImageSizeError,
    UnsupportedTypeError,
    VersionMismatchError,
)

PRIOR_MAGIC = b"PDNZ"
PRIOR_VERSION = 1

SYNTHETIC_KINDS = (
    "two_point",
    "sphere_shell",
    "circle_embedded",
    "affine_codim2",
    "cluster_mixture",
)


@dataclass(frozen=True)
class EmpiricalPrior:
    """Immutable atom cloud: n points in R^dim with optional opaque labels.

    Duplicate atoms are allowed and simply carry multiplicity weight.
    """

    dim: int
    atoms: np.ndarray
    labels: tuple | None = None
    source: str = ""

    def __post_init__(self):
        atoms = np.ascontiguousarray(np.asarray(self.atoms, dtype=np.float64))
        if atoms.ndim != 2 or atoms.shape[0] < 1:
            raise InvalidParameterError(f"atoms must be a nonempty (n, dim) array, got shape {atoms.shape}")
        if atoms.shape[1] != self.dim:
            raise DimensionMismatchError(
                f"atoms have dimension {atoms.shape[1]}, expected dim={self.dim}"
            )
        if self.dim < 3:
            raise InvalidParameterError(f"dim must be >= 3, got {self.dim}")
        if not np.isfinite(atoms).all():
            raise InvalidParameterError("atoms must be finite")
        if self.labels is not None and len(self.labels) != atoms.shape[0]:
            raise InvalidParameterError(
                f"labels: expected {atoms.shape[0]} entries, got {len(self.labels)}"
            )
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n(self) -> int:
        return self.atoms.shape[0]


@dataclass(frozen=True)
class ImageGrid:
    """Square image at dyadic resolution: 2^k x 2^k real pixels, row-major."""

    resolution_log2: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.resolution_log2 < 0:
            raise InvalidParameterError(f"resolution_log2 must be >= 0, got {self.resolution_log2}")
        side = 2**self.resolution_log2
        pixels = np.ascontiguousarray(np.asarray(self.pixels, dtype=np.float64))
        if pixels.shape != (side, side):
            raise DimensionMismatchError(
                f"pixels must have shape ({side}, {side}), got {pixels.shape}"
            )
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def flat_dim(self) -> int:
        return 2 ** (2 * self.resolution_log2)


def _require(cond: bool, key: str, msg: str):
    if not cond:
        raise InvalidParameterError(f"{key}: {msg}")


def generate_synthetic(
    kind: str, dim: int, n: int, seed: int, shape_params: dict | None = None
) -> EmpiricalPrior:
    """Deterministic synthetic atom clouds on simple geometric loci.

    Kinds and their ``shape_params``:

    - ``two_point``: ``separation`` (default 2.0); atoms alternate between
      +/- separation/2 along the first axis.
    - ``sphere_shell``: ``radius`` (default 1.0); uniform directions scaled to
      the shell.
    - ``circle_embedded``: ``radius``; circle in the first two coordinates.
      Requires dim >= 4 so the circle has codimension at least two.
    - ``affine_codim2``: ``spread``, ``offset``; Gaussian cloud in the first
      dim-2 coordinates, last two coordinates pinned to ``offset``.
    - ``cluster_mixture``: ``centers`` (count), ``spread``, ``center_scale``;
      centers drawn standard normal * center_scale, atoms assigned round-robin
      with labels set to the cluster index.
    """
    params = dict(shape_params or {})
    _require(dim >= 3, "dim", f"must be >= 3, got {dim}")
    _require(n >= 1, "n", f"must be >= 1, got {n}")
    if kind not in SYNTHETIC_KINDS:
        raise InvalidParameterError(f"kind: unknown generator {kind!r}; choose from {SYNTHETIC_KINDS}")

    rng = np.random.default_rng(seed)
    labels = None

    if kind == "two_point":
        sep = float(params.pop("separation", 2.0))
        _require(sep > 0, "separation", f"must be > 0, got {sep}")
        atoms = np.zeros((n, dim))
        half = sep / 2.0
        atoms[0::2, 0] = half
        atoms[1::2, 0] = -half
    elif kind == "sphere_shell":
        radius = float(params.pop("radius", 1.0))
        _require(radius > 0, "radius", f"must be > 0, got {radius}")
        g = rng.standard_normal((n, dim))
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        atoms = radius * g / norms
    elif kind == "circle_embedded":
        _require(dim >= 4, "dim", "circle_embedded needs dim >= 4 (codimension >= 2)")
        radius = float(params.pop("radius", 1.0))
        _require(radius > 0, "radius", f"must be > 0, got {radius}")
        theta = rng.uniform(0.0, 2.0 * math.pi, n)
        atoms = np.zeros((n, dim))
        atoms[:, 0] = radius * np.cos(theta)
        atoms[:, 1] = radius * np.sin(theta)
    elif kind == "affine_codim2":
        spread = float(params.pop("spread", 1.0))
        offset = float(params.pop("offset", 0.0))
        _require(spread > 0, "spread", f"must be > 0, got {spread}")
        atoms = np.zeros((n, dim))
        atoms[:, : dim - 2] = spread * rng.standard_normal((n, dim - 2))
        atoms[:, dim - 2 :] = offset
    else:  # cluster_mixture
        k = int(params.pop("centers", 2))
        spread = float(params.pop("spread", 0.1))
        center_scale = float(params.pop("center_scale", 1.0))
        _require(k >= 1, "centers", f"must be >= 1, got {k}")
        _require(spread >= 0, "spread", f"must be >= 0, got {spread}")
        centers = center_scale * rng.standard_normal((k, dim))
        assign = np.arange(n) % k
        atoms = centers[assign] + spread * rng.standard_normal((n, dim))
        labels = tuple(int(a) for a in assign)

    if params:
        raise InvalidParameterError(f"{next(iter(params))}: unknown parameter for kind {kind!r}")
    source = f"synthetic:{kind}(dim={dim},n={n},seed={seed})"
    return EmpiricalPrior(dim=dim, atoms=atoms, labels=labels, source=source)


def cluster_centers(kind: str, dim: int, n: int, seed: int, shape_params: dict | None = None) -> np.ndarray:
    """The exact centers a ``cluster_mixture`` generation with these arguments used."""
    if kind != "cluster_mixture":
        raise InvalidParameterError(f"kind: centers only defined for cluster_mixture, got {kind!r}")
    params = dict(shape_params or {})
    k = int(params.get("centers", 2))
    center_scale = float(params.get("center_scale", 1.0))
    rng = np.random.default_rng(seed)
    return center_scale * rng.standard_normal((k, dim))


def _halve(pixels: np.ndarray) -> np.ndarray:
    # Fixed association order so repeated halving is bitwise reproducible.
    return (
        (pixels[0::2, 0::2] + pixels[0::2, 1::2])
        + (pixels[1::2, 0::2] + pixels[1::2, 1::2])
    ) * 0.25


def discretize(image, target_k: int) -> ImageGrid:
    """Block-average a fine dyadic grid down to resolution 2^target_k.

    Implemented as repeated 2x2 averaging, one dyadic level at a time, so that
    discretizing in two stages (fine -> k+1 -> k) is *bitwise identical* to
    discretizing directly (fine -> k): the two run the same halving chain.
    """
    if isinstance(image, ImageGrid):
        pixels = image.pixels
        k_in = image.resolution_log2
    else:
        pixels = np.asarray(image, dtype=np.float64)
        if pixels.ndim != 2 or pixels.shape[0] != pixels.shape[1]:
            raise DimensionMismatchError(f"image must be square, got shape {pixels.shape}")
        k_in = int(round(math.log2(pixels.shape[0])))
        if 2**k_in != pixels.shape[0]:
            raise DimensionMismatchError(
                f"image side {pixels.shape[0]} is not a power of two"
            )
    if target_k > k_in:
        raise DimensionMismatchError(
            f"target_k={target_k} exceeds input resolution_log2={k_in}"
        )
    if target_k < 0:
        raise InvalidParameterError(f"target_k: must be >= 0, got {target_k}")
    out = np.asarray(pixels, dtype=np.float64)
    for _ in range(k_in - target_k):
        out = _halve(out)
    return ImageGrid(resolution_log2=target_k, pixels=out)


# --- IDX image files -------------------------------------------------------

IDX_IMAGE_MAGIC = 0x00000803


def load_idx(path, *, crop_to_pow2: bool = False) -> list[ImageGrid]:
    """Read an IDX unsigned-byte image file into unit-range image grids.

    The header is big-endian: magic 0x00000803 (ubyte data, 3 dimensions),
    then count, rows, cols as u32, then row-major pixel bytes.  Pixels map to
    [0, 1] by division by 255.  Images must be square with a power-of-two
    side; pass ``crop_to_pow2=True`` to center-crop other sizes (e.g. 28x28
    handwritten-digit scans become 16x16) instead of erroring.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFileError(f"file has {len(raw)} bytes; need at least 4 for the magic")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != IDX_IMAGE_MAGIC:
        dtype_byte = (magic >> 8) & 0xFF
        ndim = magic & 0xFF
        if (magic >> 16) != 0:
            raise MalformedMagicError(
                f"bad magic 0x{magic:08x} at offset 0: first two bytes must be zero"
            )
        if dtype_byte != 0x08 or ndim != 3:
            raise UnsupportedTypeError(
                f"magic 0x{magic:08x} at offset 0: only ubyte image files "
                f"(0x{IDX_IMAGE_MAGIC:08x}) are supported"
            )
    if len(raw) < 16:
        raise TruncatedFileError(
            f"header needs 16 bytes (magic + 3 dims), file has {len(raw)}"
        )
    count, rows, cols = struct.unpack(">III", raw[4:16])
    expected = 16 + count * rows * cols
    if len(raw) < expected:
        raise TruncatedFileError(
            f"expected {expected} bytes ({count} images of {rows}x{cols} after the "
            f"16-byte header), got {len(raw)}"
        )
    if rows != cols:
        raise UnsupportedImageSizeError(f"images must be square, got {rows}x{cols}")
    k = int(round(math.log2(rows))) if rows > 0 else -1
    if rows <= 0 or 2**k != rows:
        if not crop_to_pow2:
            raise UnsupportedImageSizeError(
                f"side {rows} is not a power of two; pass crop_to_pow2=True to center-crop"
            )
        side = 2 ** int(math.floor(math.log2(rows)))
        lo = (rows - side) // 2
    else:
        side, lo = rows, 0

    data = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    imgs = data.reshape(count, rows, cols).astype(np.float64) / 255.0
    k = int(round(math.log2(side)))
    return [
        ImageGrid(resolution_log2=k, pixels=img[lo : lo + side, lo : lo + side])
        for img in imgs
    ]


def prior_from_grids(grids, labels=None, source: str = "grids") -> EmpiricalPrior:
    """Stack image grids (row-major flattening) into an atom cloud."""
    grids = list(grids)
    if not grids:
        raise InvalidParameterError("grids: need at least one image")
    k = grids[0].resolution_log2
    if any(g.resolution_log2 != k for g in grids):
        raise DimensionMismatchError("grids: mixed resolutions")
    atoms = np.stack([g.pixels.reshape(-1) for g in grids])
    return EmpiricalPrior(dim=atoms.shape[1], atoms=atoms, labels=labels, source=source)


def grid_from_atom(atom, resolution_log2: int) -> ImageGrid:
    """Reshape a flat atom back into its image grid."""
    side = 2**resolution_log2
    atom = np.asarray(atom, dtype=np.float64)
    if atom.shape != (side * side,):
        raise DimensionMismatchError(
            f"atom of length {atom.shape} does not match a {side}x{side} grid"
        )
    return ImageGrid(resolution_log2=resolution_log2, pixels=atom.reshape(side, side))


# --- binary persistence ----------------------------------------------------
#
# Layout (all integers little-endian):
#   magic "PDNZ" | u32 version | u32 dim | u64 n
#   n*dim float64 atom payload
#   u8 has_labels  [u32 len + utf8]*n
#   u8 has_source  [u32 len + utf8]
# The label and source blocks are optional trailers.


def save_prior(prior: EmpiricalPrior, path) -> None:
    buf = io.BytesIO()
    buf.write(PRIOR_MAGIC)
    buf.write(struct.pack("<IIQ", PRIOR_VERSION, prior.dim, prior.n))
    buf.write(np.ascontiguousarray(prior.atoms, dtype="<f8").tobytes())
    if prior.labels is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        for lab in prior.labels:
            enc = str(lab).encode("utf-8")
            buf.write(struct.pack("<I", len(enc)))
            buf.write(enc)
    if prior.source:
        enc = prior.source.encode("utf-8")
        buf.write(b"\x01" + struct.pack("<I", len(enc)) + enc)
    else:
        buf.write(b"\x00")
    Path(path).write_bytes(buf.getvalue())


def _read_exact(buf: io.BytesIO, nbytes: int, what: str) -> bytes:
    data = buf.read(nbytes)
    if len(data) != nbytes:
        raise PriorFormatError(f"truncated file: wanted {nbytes} bytes for {what}, got {len(data)}")
    return data


def load_prior(path) -> EmpiricalPrior:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != PRIOR_MAGIC:
        raise CorruptHeaderError(
            f"bad or missing magic (file starts with {raw[:4]!r}, expected {PRIOR_MAGIC!r})"
        )
    buf = io.BytesIO(raw[4:])
    version, dim, n = struct.unpack("<IIQ", _read_exact(buf, 16, "header"))
    if version != PRIOR_VERSION:
        raise VersionMismatchError(f"file version {version}, reader supports {PRIOR_VERSION}")
    atoms = np.frombuffer(
        _read_exact(buf, 8 * dim * n, "atom payload"), dtype="<f8"
    ).reshape(n, dim)
    labels = None
    has_labels = _read_exact(buf, 1, "label flag")[0]
    if has_labels == 1:
        labels = []
        for i in range(n):
            (ln,) = struct.unpack("<I", _read_exact(buf, 4, f"label {i} length"))
            labels.append(_read_exact(buf, ln, f"label {i}").decode("utf-8"))
        labels = tuple(labels)
    elif has_labels != 0:
        raise PriorFormatError(f"label flag must be 0 or 1, got {has_labels}")
    source = ""
    has_source = _read_exact(buf, 1, "source flag")[0]
    if has_source == 1:
        (ln,) = struct.unpack("<I", _read_exact(buf, 4, "source length"))
        source = _read_exact(buf, ln, "source").decode("utf-8")
    elif has_source != 0:
        raise PriorFormatError(f"source flag must be 0 or 1, got {has_source}")
    return EmpiricalPrior(dim=dim, atoms=atoms.copy(), labels=labels, source=source)


def export_atoms_csv(prior: EmpiricalPrior, path) -> None:
    """Write atoms as CSV: literal header line ``dim,n``, the values, then one atom per row."""
    lines = ["dim,n", f"{prior.dim},{prior.n}"]
    for row in prior.atoms:
        lines.append(",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
