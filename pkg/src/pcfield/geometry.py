"""Barycentric coordinate systems and dense coordinate fields.

A coordinate system is a non-degenerate triangle (a, b, c) with `a` acting as
the origin. Signed triangle areas extend barycentric coordinates to the whole
plane: points outside the triangle get components outside [0, 1], but the
partition of unity and the affine invariance both hold everywhere.

Conventions used throughout the package:

* Continuous points are (x, y). Array grids are indexed [row, col], and pixel
  (row i, col j) sits at the continuous point (x=j, y=i). No half-pixel offset.
* Coordinate grids are float64, shape (height, width). Invalid pixels carry 0.

The dense encoding of a field against a system keeps the first two components
(weights of c and b); the third is redundant through the partition of unity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_bytes
from .errors import BadMagic, DegenerateBcs, DimMismatch, InsufficientData, TruncatedFile

# Triangles with |signed area| at or below this are treated as degenerate.
EPS_AREA = 1e-8

CFLD_MAGIC = b"CFLD"
CFLD_VERSION = 1


@dataclass(frozen=True)
class Point2:
    """A 2D point with finite coordinates."""

    x: float
    y: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError(f"point coordinates must be finite, got ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass(frozen=True)
class AffineMap:
    """Invertible affine map p -> linear @ p + translation."""

    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        lin = np.asarray(self.linear, dtype=np.float64).reshape(2, 2)
        tra = np.asarray(self.translation, dtype=np.float64).reshape(2)
        if np.linalg.det(lin) == 0.0:
            raise ValueError("affine map must be invertible")
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "translation", tra)

    @classmethod
    def identity(cls) -> "AffineMap":
        return cls(np.eye(2), np.zeros(2))

    def inverse(self) -> "AffineMap":
        inv = np.linalg.inv(self.linear)
        return AffineMap(inv, -inv @ self.translation)


def signed_area(a: Point2, b: Point2, c: Point2) -> float:
    """Signed area of triangle (a, b, c); positive for counterclockwise order
    in an x-right, y-up frame."""
    return 0.5 * ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x))


@dataclass(frozen=True)
class Bcs:
    """Barycentric coordinate system: triangle (a, b, c) with origin a.

    Construction rejects collinear vertices, so every live instance is usable
    as a coordinate basis.
    """

    a: Point2
    b: Point2
    c: Point2

    def __post_init__(self) -> None:
        if abs(signed_area(self.a, self.b, self.c)) <= EPS_AREA:
            raise DegenerateBcs(
                f"vertices are collinear within tolerance {EPS_AREA}: "
                f"{self.a}, {self.b}, {self.c}"
            )

    @property
    def origin(self) -> Point2:
        return self.a

    def vertices(self) -> np.ndarray:
        """Vertex coordinates as a (3, 2) array in (a, b, c) order."""
        return np.array([[self.a.x, self.a.y], [self.b.x, self.b.y], [self.c.x, self.c.y]])


@dataclass(frozen=True)
class BarycentricCoord:
    """Coordinates (l1, l2, l3): weights of c, b, a. They sum to 1."""

    l1: float
    l2: float
    l3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.l1, self.l2, self.l3], dtype=np.float64)


def bary_coords(p: Point2, bcs: Bcs) -> BarycentricCoord:
    """Barycentric coordinates of p in the given system.

    Signed-area ratios, valid over the whole plane:

        l1 = area(a, b, p) / area(a, b, c)   (weight of c)
        l2 = area(a, p, c) / area(a, b, c)   (weight of b)
        l3 = area(p, b, c) / area(a, b, c)   (weight of a)

    so l1 + l2 + l3 = 1 and l1*c + l2*b + l3*a reconstructs p.
    """
    area = signed_area(bcs.a, bcs.b, bcs.c)
    l1 = signed_area(bcs.a, bcs.b, p) / area
    l2 = signed_area(bcs.a, p, bcs.c) / area
    l3 = signed_area(p, bcs.b, bcs.c) / area
    return BarycentricCoord(l1, l2, l3)


def apply_affine(m: AffineMap, p: Point2) -> Point2:
    """Apply m to a single point."""
    v = m.linear @ p.as_array() + m.translation
    return Point2(float(v[0]), float(v[1]))


def transform_bcs(m: AffineMap, bcs: Bcs) -> Bcs:
    """Apply m to all three vertices. Invertible maps preserve non-degeneracy."""
    return Bcs(apply_affine(m, bcs.a), apply_affine(m, bcs.b), apply_affine(m, bcs.c))


@dataclass
class CoordField:
    """Dense two-channel coordinate field with a validity mask.

    lambda1 and lambda2 are (height, width) float64 grids holding the first
    two barycentric components; invalid pixels are zeroed at construction.
    """

    width: int
    height: int
    lambda1: np.ndarray
    lambda2: np.ndarray
    valid: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        shape = (self.height, self.width)
        self.lambda1 = np.asarray(self.lambda1, dtype=np.float64)
        self.lambda2 = np.asarray(self.lambda2, dtype=np.float64)
        if self.valid is None:
            self.valid = np.ones(shape, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.lambda1.shape != shape or self.lambda2.shape != shape or self.valid.shape != shape:
            raise DimMismatch(
                f"coordinate grids must be {shape}, got {self.lambda1.shape}, "
                f"{self.lambda2.shape}, {self.valid.shape}"
            )
        self.lambda1 = np.where(self.valid, self.lambda1, 0.0)
        self.lambda2 = np.where(self.valid, self.lambda2, 0.0)
        if not np.all(np.isfinite(self.lambda1[self.valid])) or not np.all(
            np.isfinite(self.lambda2[self.valid])
        ):
            raise ValueError("coordinate values must be finite on valid pixels")


def encode_field(width: int, height: int, bcs: Bcs, valid: np.ndarray | None = None) -> CoordField:
    """Encode every pixel of a width x height grid in the given system.

    Pixel (i, j) is encoded at the continuous point (x=j, y=i). Barycentric
    components are affine in the point, so the whole grid is two affine planes.
    """
    area = signed_area(bcs.a, bcs.b, bcs.c)
    xs = np.arange(width, dtype=np.float64)[None, :]
    ys = np.arange(height, dtype=np.float64)[:, None]
    ax, ay = bcs.a.x, bcs.a.y
    # l1 = area(a, b, p) / area, l2 = area(a, p, c) / area, expanded.
    l1 = 0.5 * ((bcs.b.x - ax) * (ys - ay) - (bcs.b.y - ay) * (xs - ax)) / area
    l2 = 0.5 * ((xs - ax) * (bcs.c.y - ay) - (ys - ay) * (bcs.c.x - ax)) / area
    l1, l2 = np.broadcast_to(l1, (height, width)), np.broadcast_to(l2, (height, width))
    return CoordField(width, height, l1.copy(), l2.copy(), valid)


def zero_score_normalize(
    values: np.ndarray, valid: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalize each channel to mean 0 and population std 1 over valid entries.

    values: (..., C) array, or 1D for a single channel. valid: boolean mask of
    the leading shape, or None for all valid. Invalid entries pass through
    untouched. A channel whose std falls below 1e-12 is only mean-centered and
    its std is reported as 0, so the returned (mean, std) pair always replays:
    normalized = (x - mean) / std  where std > 0, else x - mean.

    Returns (normalized, mean, std) with mean and std of shape (C,), or
    scalars for 1D input. Raises InsufficientData when fewer than 2 entries
    are valid.
    """
    arr = np.asarray(values, dtype=np.float64)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[:, None]
    lead_shape = arr.shape[:-1]
    nch = arr.shape[-1]
    if valid is None:
        mask = np.ones(lead_shape, dtype=bool)
    else:
        mask = np.asarray(valid, dtype=bool)
        if mask.shape != lead_shape:
            raise DimMismatch(f"valid mask must be {lead_shape}, got {mask.shape}")
    flat = arr.reshape(-1, nch)
    sel = mask.reshape(-1)
    n = int(sel.sum())
    if n < 2:
        raise InsufficientData(f"need at least 2 valid entries, got {n}")
    mean = flat[sel].mean(axis=0)
    std = flat[sel].std(axis=0)  # population std
    std = np.where(std < 1e-12, 0.0, std)
    out = flat.copy()
    centered = flat[sel] - mean
    out[sel] = np.where(std > 0.0, centered / np.where(std > 0.0, std, 1.0), centered)
    out = out.reshape(arr.shape)
    if squeeze:
        return out[:, 0], float(mean[0]), float(std[0])
    return out, mean, std


# ---------------------------------------------------------------------------
# CFLD container format: little-endian header (magic "CFLD", u32 version,
# u32 width, u32 height, u32 channels) then row-major channel-interleaved f32.


def write_cfld(path: str, data: np.ndarray) -> None:
    """Write a (H, W, C) array as a CFLD file (values stored as f32)."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3:
        raise DimMismatch(f"expected (H, W, C) data, got shape {arr.shape}")
    h, w, c = arr.shape
    header = CFLD_MAGIC + struct.pack("<IIII", CFLD_VERSION, w, h, c)
    atomic_write_bytes(path, header + arr.astype("<f4").tobytes())


def read_cfld(path: str) -> np.ndarray:
    """Read a CFLD file as a (H, W, C) float64 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20:
        raise TruncatedFile(f"{path}: header needs 20 bytes, file has {len(raw)}")
    if raw[:4] != CFLD_MAGIC:
        raise BadMagic(f"{path}: expected magic {CFLD_MAGIC!r}, got {raw[:4]!r}")
    version, w, h, c = struct.unpack("<IIII", raw[4:20])
    if version != CFLD_VERSION:
        raise BadMagic(f"{path}: unsupported version {version}")
    need = 20 + 4 * w * h * c
    if len(raw) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, file has {len(raw)}")
    data = np.frombuffer(raw[20:need], dtype="<f4").reshape(h, w, c)
    return data.astype(np.float64)


def save_coord_field(path: str, fld: CoordField) -> None:
    """Persist a coordinate field as a 3-channel CFLD (lambda1, lambda2, validity)."""
    data = np.stack([fld.lambda1, fld.lambda2, fld.valid.astype(np.float64)], axis=-1)
    write_cfld(path, data)


def load_coord_field(path: str) -> CoordField:
    """Load a CFLD written by save_coord_field (2 channels mean all-valid)."""
    data = read_cfld(path)
    h, w, c = data.shape
    if c == 2:
        return CoordField(w, h, data[..., 0], data[..., 1])
    if c == 3:
        return CoordField(w, h, data[..., 0], data[..., 1], data[..., 2] > 0.5)
    raise DimMismatch(f"{path}: expected 2 or 3 channels for a coordinate field, got {c}")
