"""Dense flow fields, warping, and the .flo interchange format.

Flow semantics: the flow lives on the target grid, and target pixel q
corresponds to the continuous source point q + Y(q). Warping a source-frame
field therefore pulls values back onto the target grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_bytes
from .errors import BadMagic, DimMismatch, SingularHomography, TruncatedFile
from .geometry import CoordField

FLO_MAGIC = 202021.25
FLO_INVALID = 1e9


@dataclass
class ScalarField:
    """Single-channel float64 grid."""

    width: int
    height: int
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.height, self.width):
            raise DimMismatch(
                f"values must be {(self.height, self.width)}, got {self.values.shape}"
            )


@dataclass
class FlowField:
    """Dense displacement field (u, v) with a validity mask.

    u and v are finite on valid pixels and zeroed on invalid ones, so fields
    round-trip exactly through the .flo sentinel encoding.
    """

    width: int
    height: int
    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        shape = (self.height, self.width)
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.valid is None:
            self.valid = np.ones(shape, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.u.shape != shape or self.v.shape != shape or self.valid.shape != shape:
            raise DimMismatch(
                f"flow grids must be {shape}, got {self.u.shape}, {self.v.shape}, "
                f"{self.valid.shape}"
            )
        self.u = np.where(self.valid, self.u, 0.0)
        self.v = np.where(self.valid, self.v, 0.0)
        if not np.all(np.isfinite(self.u[self.valid])) or not np.all(
            np.isfinite(self.v[self.valid])
        ):
            raise ValueError("flow must be finite on valid pixels")


@dataclass(frozen=True)
class HomographyMap:
    """3x3 projective map, normalized so the last entry is 1 when nonzero."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        mat = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(mat)) < 1e-12:
            raise SingularHomography("homography matrix is singular")
        if mat[2, 2] != 0.0:
            mat = mat / mat[2, 2]
        object.__setattr__(self, "matrix", mat)

    @classmethod
    def identity(cls) -> "HomographyMap":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "HomographyMap":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    def inverse(self) -> "HomographyMap":
        return HomographyMap(np.linalg.inv(self.matrix))

    def apply_xy(self, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Map point arrays; returns (x', y', ok) where ok is False at points
        whose projective denominator vanishes."""
        m = self.matrix
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        z = m[2, 0] * xs + m[2, 1] * ys + m[2, 2]
        ok = np.abs(z) > 1e-12
        zsafe = np.where(ok, z, 1.0)
        xo = (m[0, 0] * xs + m[0, 1] * ys + m[0, 2]) / zsafe
        yo = (m[1, 0] * xs + m[1, 1] * ys + m[1, 2]) / zsafe
        return xo, yo, ok


def sample_bilinear(
    channels: list[np.ndarray],
    valid: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    extrapolate: bool = False,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Bilinearly sample channel grids at continuous points.

    A sample is ok when all four corners of its cell are valid; unless
    extrapolate is set, the point must also lie inside the grid bounds.
    With extrapolate, points clamp to the nearest boundary cell and the
    bilinear weights extend it linearly (exact for affine-plane data).
    Sampled values are zeroed where not ok.
    """
    h, w = valid.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    x0 = np.clip(np.floor(xs), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(ys), 0, max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    ok = valid[y0, x0] & valid[y0, x1] & valid[y1, x0] & valid[y1, x1]
    if not extrapolate:
        ok = ok & (xs >= 0.0) & (xs <= w - 1.0) & (ys >= 0.0) & (ys <= h - 1.0)
    w00 = (1.0 - fx) * (1.0 - fy)
    w01 = fx * (1.0 - fy)
    w10 = (1.0 - fx) * fy
    w11 = fx * fy
    out = []
    for ch in channels:
        val = w00 * ch[y0, x0] + w01 * ch[y0, x1] + w10 * ch[y1, x0] + w11 * ch[y1, x1]
        out.append(np.where(ok, val, 0.0))
    return out, ok


def warp_field(src: CoordField, flow: FlowField) -> CoordField:
    """Pull a source-frame coordinate field onto the target grid.

    Output pixel q takes the bilinear sample of src at q + Y(q). A pixel is
    valid when the flow is valid there, the sample point lies inside the
    source bounds, and all four sample corners are valid.
    """
    if (src.width, src.height) != (flow.width, flow.height):
        raise DimMismatch(
            f"source field is {src.width}x{src.height}, flow is {flow.width}x{flow.height}"
        )
    ys, xs = np.mgrid[0 : flow.height, 0 : flow.width].astype(np.float64)
    sx = xs + flow.u
    sy = ys + flow.v
    (l1, l2), ok = sample_bilinear([src.lambda1, src.lambda2], src.valid, sx, sy)
    out_valid = flow.valid & ok
    return CoordField(flow.width, flow.height, l1, l2, out_valid)


def error_map(ct: CoordField, cr: CoordField) -> ScalarField:
    """Euclidean distance between two coordinate fields per pixel.

    Pixels not valid in both fields get the sentinel -1.
    """
    if (ct.width, ct.height) != (cr.width, cr.height):
        raise DimMismatch(f"fields are {ct.width}x{ct.height} vs {cr.width}x{cr.height}")
    joint = ct.valid & cr.valid
    d = np.hypot(ct.lambda1 - cr.lambda1, ct.lambda2 - cr.lambda2)
    return ScalarField(ct.width, ct.height, np.where(joint, d, -1.0))


def upsample_bilinear(fld: CoordField | FlowField, factor: int):
    """Upsample a field by an integer factor with bilinear interpolation.

    Output pixel (X, Y) samples the input at (X / factor, Y / factor), so
    output pixel (0, 0) is aligned with input pixel (0, 0) and coordinate
    planes stay exact. Flow displacement values are additionally multiplied
    by the factor. The border band past the last input sample extends the
    outermost cell linearly.
    """
    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    w2, h2 = fld.width * factor, fld.height * factor
    ys, xs = np.mgrid[0:h2, 0:w2].astype(np.float64)
    sx = xs / factor
    sy = ys / factor
    if isinstance(fld, CoordField):
        (l1, l2), ok = sample_bilinear([fld.lambda1, fld.lambda2], fld.valid, sx, sy, True)
        return CoordField(w2, h2, l1, l2, ok)
    if isinstance(fld, FlowField):
        (u, v), ok = sample_bilinear([fld.u, fld.v], fld.valid, sx, sy, True)
        return FlowField(w2, h2, u * factor, v * factor, ok)
    raise TypeError(f"cannot upsample {type(fld).__name__}")


def synth_flow_homography(
    h: HomographyMap,
    width: int,
    height: int,
    occluders: tuple[tuple[int, int, int, int], ...] = (),
    noise_sigma: float = 0.0,
    rng_seed: int = 0,
) -> FlowField:
    """Synthesize the flow induced by a homography mapping source to target.

    Y(q) = project(h^-1 q) - q, so target pixel q points at its source
    preimage. Occluder rectangles (x, y, w, h) are marked invalid; optional
    i.i.d. Gaussian noise (std noise_sigma) is added to the valid flow,
    seeded for determinism.
    """
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    xo, yo, ok = h.inverse().apply_xy(xs, ys)
    u = np.where(ok, xo - xs, 0.0)
    v = np.where(ok, yo - ys, 0.0)
    valid = ok.copy()
    for (rx, ry, rw, rh) in occluders:
        x0, y0 = max(int(rx), 0), max(int(ry), 0)
        x1, y1 = min(int(rx + rw), width), min(int(ry + rh), height)
        if x1 > x0 and y1 > y0:
            valid[y0:y1, x0:x1] = False
    if noise_sigma > 0.0:
        rng = np.random.default_rng(rng_seed)
        noise = rng.normal(0.0, noise_sigma, size=(height, width, 2))
        u = u + noise[..., 0]
        v = v + noise[..., 1]
    return FlowField(width, height, u, v, valid)


def write_flo(path: str, flow: FlowField) -> None:
    """Write a flow field in .flo layout: f32 magic 202021.25, i32 width,
    i32 height, then row-major interleaved f32 (u, v). Invalid pixels are
    stored as the 1e9 sentinel in both channels."""
    header = np.array([FLO_MAGIC], dtype="<f4").tobytes()
    header += np.array([flow.width, flow.height], dtype="<i4").tobytes()
    data = np.empty((flow.height, flow.width, 2), dtype="<f4")
    data[..., 0] = np.where(flow.valid, flow.u, FLO_INVALID)
    data[..., 1] = np.where(flow.valid, flow.v, FLO_INVALID)
    atomic_write_bytes(path, header + data.tobytes())


def read_flo(path: str) -> FlowField:
    """Read a .flo file written by write_flo (u == 1e9 marks invalid)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise TruncatedFile(f"{path}: header needs 12 bytes, file has {len(raw)}")
    magic = np.frombuffer(raw[:4], dtype="<f4")[0]
    if magic != np.float32(FLO_MAGIC):
        raise BadMagic(f"{path}: bad magic {magic!r}")
    w, h = (int(x) for x in np.frombuffer(raw[4:12], dtype="<i4"))
    need = 12 + 8 * w * h
    if len(raw) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, file has {len(raw)}")
    data = np.frombuffer(raw[12:need], dtype="<f4").reshape(h, w, 2)
    valid = data[..., 0] != np.float32(FLO_INVALID)
    return FlowField(w, h, data[..., 0].astype(np.float64), data[..., 1].astype(np.float64), valid)
