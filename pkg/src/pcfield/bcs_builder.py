"""Flow-driven construction of coordinate system pairs.

The target-side origin is placed at the peak of the pooled flow density: for
each target pixel, count how many valid pixels land (after rounding) on its
rounded source location, then box-average the counts. Two auxiliary vertices
are drawn uniformly from a disk around the origin and carried to the source
frame by the flow, giving a matched pair of triangles.

Re-selection wraps the builder: when a caller-supplied confidence probe
rejects the built pair, a disk around the rejected origin is masked out and
the build retried, up to max_reselect extra rounds. Exhaustion produces a
Fallback value rather than an error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from ._io import save_gray16_png
from .errors import (
    DegenerateAfterRetries,
    DimMismatch,
    EmptyFlow,
    InvalidFlowAtVertex,
    NoCandidate,
)
from .flowfield import FlowField, sample_bilinear
from .geometry import EPS_AREA, Bcs, Point2, signed_area

MAX_VERTEX_ATTEMPTS = 32
MIN_VERTEX_DISTANCE = 1.0
DEFAULT_PROBE_THRESHOLD = 0.2


@dataclass(frozen=True)
class BuilderConfig:
    """k is the pooling window (odd); the vertex disk radius is (k - 1) / 2."""

    k: int = 9
    max_reselect: int = 5
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 3 or self.k % 2 == 0:
            raise ValueError(f"k must be odd and >= 3, got {self.k}")
        if self.max_reselect < 0:
            raise ValueError(f"max_reselect must be >= 0, got {self.max_reselect}")


@dataclass
class DensityMap:
    """Integer hit counts per pixel."""

    width: int
    height: int
    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.height, self.width):
            raise DimMismatch(
                f"counts must be {(self.height, self.width)}, got {self.counts.shape}"
            )


@dataclass(frozen=True)
class BcsPair:
    """Matched source and target coordinate systems."""

    source: Bcs
    target: Bcs


@dataclass(frozen=True)
class Fallback:
    """Marker returned when re-selection exhausted its retries.

    attempts counts the build rounds that were consumed (max_reselect + 1
    when fully exhausted).
    """

    attempts: int


def _round_half_up(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves toward +inf. Pinned so the density
    histogram is reproducible regardless of platform rounding mode."""
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def flow_density(flow: FlowField) -> tuple[DensityMap, DensityMap]:
    """Source hit counts and their pullback onto the target grid.

    source counts gs(p) = #{valid q : round(q + Y(q)) = p, p in bounds};
    target density gt(q) = gs(round(q + Y(q))) for valid q whose rounded
    source lands in bounds, else 0.
    """
    if not flow.valid.any():
        raise EmptyFlow("flow has no valid pixels")
    h, w = flow.height, flow.width
    ys, xs = np.mgrid[0:h, 0:w]
    px = _round_half_up(xs + flow.u)
    py = _round_half_up(ys + flow.v)
    hits = flow.valid & (px >= 0) & (px < w) & (py >= 0) & (py < h)
    gs = np.zeros((h, w), dtype=np.int64)
    np.add.at(gs, (py[hits], px[hits]), 1)
    gt = np.zeros((h, w), dtype=np.int64)
    gt[hits] = gs[py[hits], px[hits]]
    return DensityMap(w, h, gs), DensityMap(w, h, gt)


def _box_sum(counts: np.ndarray, k: int) -> np.ndarray:
    """Exact integer sum over a centered k x k window, zero padded."""
    h, w = counts.shape
    r = k // 2
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = counts.cumsum(axis=0).cumsum(axis=1)
    i0 = np.clip(np.arange(h) - r, 0, h)
    i1 = np.clip(np.arange(h) + r + 1, 0, h)
    j0 = np.clip(np.arange(w) - r, 0, w)
    j1 = np.clip(np.arange(w) + r + 1, 0, w)
    return (
        integral[np.ix_(i1, j1)]
        - integral[np.ix_(i0, j1)]
        - integral[np.ix_(i1, j0)]
        + integral[np.ix_(i0, j0)]
    )


def select_origin(gt: DensityMap, k: int, exclusion: np.ndarray | None = None) -> Point2:
    """Origin = argmax of the box-average-pooled target density.

    Pooling uses a k x k window with zero padding (the divisor k^2 is uniform,
    so the argmax is computed on exact integer window sums). Excluded pixels
    are not candidates. Pooled ties are broken by the higher raw count at the
    pixel, then by row-major order. Raises NoCandidate when every non-excluded
    pooled value is 0.
    """
    if k < 1 or k % 2 == 0:
        raise ValueError(f"k must be odd and >= 1, got {k}")
    counts = gt.counts
    h, w = counts.shape
    if exclusion is None:
        allowed = np.ones((h, w), dtype=bool)
    else:
        exclusion = np.asarray(exclusion, dtype=bool)
        if exclusion.shape != (h, w):
            raise DimMismatch(f"exclusion must be {(h, w)}, got {exclusion.shape}")
        allowed = ~exclusion
    pooled = np.where(allowed, _box_sum(counts, k), -1)
    best = pooled.max()
    if best <= 0:
        raise NoCandidate("all non-excluded pooled densities are zero")
    tied = pooled == best
    raw_best = counts[tied].max()
    idx = int(np.argmax(tied & (counts == raw_best)))
    i, j = divmod(idx, w)
    return Point2(float(j), float(i))


def _sample_disk(rng: np.random.Generator, center: Point2, radius: float) -> Point2:
    rad = radius * math.sqrt(rng.random())
    ang = 2.0 * math.pi * rng.random()
    return Point2(center.x + rad * math.cos(ang), center.y + rad * math.sin(ang))


def _min_pairwise_distance(pts: list[Point2]) -> float:
    best = math.inf
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            best = min(best, math.hypot(pts[i].x - pts[j].x, pts[i].y - pts[j].y))
    return best


def _flow_at(flow: FlowField, p: Point2) -> tuple[float, float, bool]:
    (u, v), ok = sample_bilinear(
        [flow.u, flow.v], flow.valid, np.array([p.x]), np.array([p.y])
    )
    return float(u[0]), float(v[0]), bool(ok[0])


def build_bcs_pair(
    flow: FlowField, cfg: BuilderConfig, exclusion: np.ndarray | None = None
) -> BcsPair:
    """Build one matched pair of coordinate systems from the flow.

    The target origin comes from select_origin; two auxiliary target vertices
    are drawn uniformly (seeded by cfg.rng_seed) from the disk of radius
    (k - 1) / 2 around it, redrawn up to 32 times until the target triangle
    has minimum pairwise vertex distance 1 px and non-negligible area and the
    source triangle (vertices displaced by the bilinearly sampled flow) is
    non-degenerate too. Any vertex landing on invalid flow raises
    InvalidFlowAtVertex; retry exhaustion raises DegenerateAfterRetries.
    """
    _, gt = flow_density(flow)
    origin = select_origin(gt, cfg.k, exclusion)
    # the origin is a vertex of every candidate triangle, so invalid flow
    # there can never be sampled around
    u0, v0, ok0 = _flow_at(flow, origin)
    if not ok0:
        err = InvalidFlowAtVertex(
            f"origin ({origin.x:.3f}, {origin.y:.3f}) lands on invalid flow"
        )
        err.origin = origin  # type: ignore[attr-defined]
        raise err
    rng = np.random.default_rng(cfg.rng_seed)
    radius = (cfg.k - 1) / 2.0
    failure: Exception | None = None
    for _ in range(MAX_VERTEX_ATTEMPTS):
        vb = _sample_disk(rng, origin, radius)
        vc = _sample_disk(rng, origin, radius)
        target_pts = [origin, vb, vc]
        if _min_pairwise_distance(target_pts) < MIN_VERTEX_DISTANCE:
            failure = DegenerateAfterRetries("target vertices too close")
            continue
        if abs(signed_area(origin, vb, vc)) <= EPS_AREA:
            failure = DegenerateAfterRetries("target triangle degenerate")
            continue
        source_pts = []
        for p in target_pts:
            u, v, ok = _flow_at(flow, p)
            if not ok:
                err = InvalidFlowAtVertex(f"vertex ({p.x:.3f}, {p.y:.3f}) lands on invalid flow")
                err.origin = origin  # type: ignore[attr-defined]
                raise err
            source_pts.append(Point2(p.x + u, p.y + v))
        if abs(signed_area(*source_pts)) <= EPS_AREA:
            failure = DegenerateAfterRetries("source triangle degenerate")
            continue
        return BcsPair(
            source=Bcs(*source_pts),
            target=Bcs(*target_pts),
        )
    err = failure or DegenerateAfterRetries("vertex sampling exhausted")
    err.origin = origin  # type: ignore[attr-defined]
    raise err


def _disk_mask(shape: tuple[int, int], center: Point2, radius: float) -> np.ndarray:
    ys, xs = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    return (xs - center.x) ** 2 + (ys - center.y) ** 2 <= radius * radius


def build_with_reselection(
    flow: FlowField,
    cfg: BuilderConfig,
    confidence_probe: Callable[[BcsPair], float],
    exclusion: np.ndarray | None = None,
    probe_threshold: float = DEFAULT_PROBE_THRESHOLD,
) -> BcsPair | Fallback:
    """Build a pair, re-selecting the origin while the probe rejects it.

    Each round builds a pair and scores it with confidence_probe; a score
    below probe_threshold masks the disk of radius (k - 1) / 2 around the
    round's origin and tries again. Build failures consume a round the same
    way (their origin disk is masked when an origin exists). After
    max_reselect + 1 rounds without an accepted pair the result is Fallback;
    no exceptions escape.
    """
    h, w = flow.height, flow.width
    if exclusion is None:
        excl = np.zeros((h, w), dtype=bool)
    else:
        excl = np.asarray(exclusion, dtype=bool).copy()
        if excl.shape != (h, w):
            raise DimMismatch(f"exclusion must be {(h, w)}, got {excl.shape}")
    radius = (cfg.k - 1) / 2.0
    attempts = 0
    for round_idx in range(cfg.max_reselect + 1):
        attempts += 1
        origin: Point2 | None = None
        try:
            pair = build_bcs_pair(flow, replace(cfg, rng_seed=cfg.rng_seed + round_idx), excl)
            origin = pair.target.origin
            if float(confidence_probe(pair)) >= probe_threshold:
                return pair
        except NoCandidate:
            return Fallback(attempts)
        except (DegenerateAfterRetries, InvalidFlowAtVertex) as exc:
            origin = getattr(exc, "origin", None)
        if origin is not None:
            excl |= _disk_mask((h, w), origin, radius)
    return Fallback(attempts)


def density_to_png(path: str, dm: DensityMap) -> None:
    """Dump counts as 16-bit grayscale, clamped at 65535."""
    save_gray16_png(path, np.clip(dm.counts, 0, 65535).astype(np.uint16))
