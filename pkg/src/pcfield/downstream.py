"""Confidence-aware consumers: clipping, masked attention, match filtering,
and iterative multi-homography classification.

These operate on sparse per-correspondence data (coordinates plus
confidence) produced by sampling coordinate fields at matched points.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_bytes
from .errors import (
    Degenerate,
    DimMismatch,
    EmptySet,
    LengthMismatch,
    TooFewPoints,
)
from .flowfield import HomographyMap


@dataclass
class SparseCoords:
    """Per-point coordinates (N, 2) with confidence (N,)."""

    coords: np.ndarray
    conf: np.ndarray

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.conf = np.asarray(self.conf, dtype=np.float64).reshape(-1)
        if self.coords.shape[0] != self.conf.shape[0]:
            raise LengthMismatch(
                f"{self.coords.shape[0]} coordinate rows vs {self.conf.shape[0]} confidences"
            )


def clip_sparse(x: SparseCoords, threshold: float = 0.5) -> SparseCoords:
    """Replace low-confidence rows by the per-column maximum.

    Rows with confidence >= threshold pass through; the rest are set to the
    columnwise maximum taken over the entire set (clipped rows included).
    Confidence passes through unchanged. Raises EmptySet on empty input.
    """
    if x.coords.shape[0] == 0:
        raise EmptySet("clip_sparse needs at least one entry")
    keep = x.conf >= threshold
    col_max = x.coords.max(axis=0)
    out = np.where(keep[:, None], x.coords, col_max[None, :])
    return SparseCoords(out, x.conf.copy())


def masked_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    m_q: np.ndarray,
    m_k: np.ndarray,
) -> np.ndarray:
    """Scaled dot-product attention with confidence-damped logits.

    logits = (m_q m_k^T) * (q k^T) / sqrt(d), row-softmaxed against v.
    All-ones masks reduce to standard attention; a zero query mask makes the
    row uniform, so its output is the column mean of v.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    m_q = np.asarray(m_q, dtype=np.float64).reshape(-1)
    m_k = np.asarray(m_k, dtype=np.float64).reshape(-1)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimMismatch("q, k, v must be 2D")
    if q.shape[1] != k.shape[1]:
        raise DimMismatch(f"q has width {q.shape[1]}, k has width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise DimMismatch(f"k has {k.shape[0]} rows, v has {v.shape[0]}")
    if m_q.shape[0] != q.shape[0] or m_k.shape[0] != k.shape[0]:
        raise DimMismatch("mask lengths must match q and k rows")
    logits = (m_q[:, None] * m_k[None, :]) * (q @ k.T) / math.sqrt(q.shape[1])
    logits = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ v


def multi_head_masked_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    m_q: np.ndarray,
    m_k: np.ndarray,
    heads: int = 4,
) -> np.ndarray:
    """Head-concatenation plumbing over masked_attention (no projections).

    Feature widths of q/k and v must divide evenly by the head count; each
    head attends over its own column slice and outputs are concatenated.
    """
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if heads < 1:
        raise ValueError(f"heads must be >= 1, got {heads}")
    if q.shape[1] % heads or v.shape[1] % heads:
        raise DimMismatch(
            f"feature widths {q.shape[1]} and {v.shape[1]} must divide by {heads} heads"
        )
    dq = q.shape[1] // heads
    dv = v.shape[1] // heads
    k = np.asarray(k, dtype=np.float64)
    outs = [
        masked_attention(
            q[:, i * dq : (i + 1) * dq],
            k[:, i * dq : (i + 1) * dq],
            v[:, i * dv : (i + 1) * dv],
            m_q,
            m_k,
        )
        for i in range(heads)
    ]
    return np.concatenate(outs, axis=1)


def filter_flags(xs: SparseCoords, xt: SparseCoords) -> np.ndarray:
    """Consistency flag per correspondence, in [-1, 1].

    tau = m_s * m_t * (3 e^{-h} - 1) / (1 + e^{-h}) with h the Euclidean
    distance between the two coordinate vectors. Positive below h = ln 3,
    negative above, and exactly 1 for coincident fully-confident points.
    """
    if xs.coords.shape[0] != xt.coords.shape[0]:
        raise LengthMismatch(
            f"{xs.coords.shape[0]} source rows vs {xt.coords.shape[0]} target rows"
        )
    h = np.linalg.norm(xs.coords - xt.coords, axis=1)
    t = np.exp(-h)
    return xs.conf * xt.conf * (3.0 * t - 1.0) / (1.0 + t)


def assemble_filter_input(
    xs: SparseCoords, xt: SparseCoords, flags_per_system: list[np.ndarray]
) -> np.ndarray:
    """Stack per-correspondence rows [x_s, x_t, tau_1, tau_2] as (N, 6).

    Up to two flag vectors are supported; a missing second system
    contributes a zero column.
    """
    n = xs.coords.shape[0]
    if xt.coords.shape[0] != n:
        raise LengthMismatch(f"{n} source rows vs {xt.coords.shape[0]} target rows")
    if not 1 <= len(flags_per_system) <= 2:
        raise LengthMismatch(f"expected 1 or 2 flag vectors, got {len(flags_per_system)}")
    cols = [xs.coords, xt.coords]
    for flags in flags_per_system:
        flags = np.asarray(flags, dtype=np.float64).reshape(-1)
        if flags.shape[0] != n:
            raise LengthMismatch(f"flag vector has {flags.shape[0]} entries, expected {n}")
        cols.append(flags[:, None])
    if len(flags_per_system) == 1:
        cols.append(np.zeros((n, 1)))
    return np.concatenate(cols, axis=1)


# ---------------------------------------------------------------------------
# Homography estimation.


def _normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    """Hartley normalization: translate to centroid, scale mean norm to sqrt(2).
    Returns (normalized points, 3x3 transform) or None for collapsed sets."""
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    mean_dist = np.mean(np.linalg.norm(centered, axis=1))
    if mean_dist < 1e-12:
        return None
    s = math.sqrt(2.0) / mean_dist
    t = np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )
    return centered * s, t


def _dlt_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Direct linear transform with Hartley normalization.

    Returns the 3x3 matrix mapping src to dst, or None when the point set is
    degenerate (collinear or collapsed).
    """
    ns = _normalize_points(src)
    nd = _normalize_points(dst)
    if ns is None or nd is None:
        return None
    sp, ts = ns
    dp, td = nd
    n = sp.shape[0]
    a = np.zeros((2 * n, 9))
    a[0::2, 0] = -sp[:, 0]
    a[0::2, 1] = -sp[:, 1]
    a[0::2, 2] = -1.0
    a[0::2, 6] = dp[:, 0] * sp[:, 0]
    a[0::2, 7] = dp[:, 0] * sp[:, 1]
    a[0::2, 8] = dp[:, 0]
    a[1::2, 3] = -sp[:, 0]
    a[1::2, 4] = -sp[:, 1]
    a[1::2, 5] = -1.0
    a[1::2, 6] = dp[:, 1] * sp[:, 0]
    a[1::2, 7] = dp[:, 1] * sp[:, 1]
    a[1::2, 8] = dp[:, 1]
    try:
        _, sv, vt = np.linalg.svd(a)
    except np.linalg.LinAlgError:
        return None
    if n == 4 and sv[-2] < 1e-9 * max(sv[0], 1.0):
        return None  # nullspace dimension > 1: degenerate minimal sample
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    if abs(np.linalg.det(h)) < 1e-12 or abs(h[2, 2]) < 1e-12:
        return None
    return h / h[2, 2]


def _apply_h(h: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = h[2, 0] * pts[:, 0] + h[2, 1] * pts[:, 1] + h[2, 2]
    ok = np.abs(z) > 1e-12
    zs = np.where(ok, z, 1.0)
    x = (h[0, 0] * pts[:, 0] + h[0, 1] * pts[:, 1] + h[0, 2]) / zs
    y = (h[1, 0] * pts[:, 0] + h[1, 1] * pts[:, 1] + h[1, 2]) / zs
    return np.stack([x, y], axis=1), ok


def _symmetric_transfer(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Per-point symmetric transfer distance sqrt(|Hs - t|^2 + |H^-1 t - s|^2);
    inf where a projective denominator vanishes."""
    hinv = np.linalg.inv(h)
    fwd, ok_f = _apply_h(h, src)
    bwd, ok_b = _apply_h(hinv, dst)
    d2 = np.sum((fwd - dst) ** 2, axis=1) + np.sum((bwd - src) ** 2, axis=1)
    return np.where(ok_f & ok_b, np.sqrt(d2), np.inf)


def estimate_homography_ransac(
    src: np.ndarray,
    dst: np.ndarray,
    eps: float = 3.0,
    iters: int = 1000,
    rng_seed: int = 0,
) -> tuple[HomographyMap, np.ndarray]:
    """RANSAC homography fit: seeded minimal samples, strict inlier test.

    Each iteration draws 4 correspondences, fits a normalized DLT, and counts
    points with symmetric transfer error < eps. The highest count wins (ties
    keep the earliest hypothesis); the winner is refit on its inliers and the
    mask recomputed under the refit model. Raises TooFewPoints below 4
    correspondences and Degenerate when no minimal sample yields a model.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = src.shape[0]
    if dst.shape[0] != n:
        raise LengthMismatch(f"{n} source points vs {dst.shape[0]} target points")
    if n < 4:
        raise TooFewPoints(f"homography needs >= 4 correspondences, got {n}")
    rng = np.random.default_rng(rng_seed)
    best_count = 0
    best_h: np.ndarray | None = None
    for _ in range(iters):
        idx = rng.choice(n, size=4, replace=False)
        h = _dlt_homography(src[idx], dst[idx])
        if h is None:
            continue
        count = int((_symmetric_transfer(h, src, dst) < eps).sum())
        if count > best_count or best_h is None:
            best_count = count
            best_h = h
    if best_h is None:
        raise Degenerate("every minimal sample was degenerate")
    mask = _symmetric_transfer(best_h, src, dst) < eps
    if mask.sum() >= 4:
        refit = _dlt_homography(src[mask], dst[mask])
        if refit is not None:
            best_h = refit
            mask = _symmetric_transfer(best_h, src, dst) < eps
    return HomographyMap(best_h), mask


@dataclass(frozen=True)
class MultiHomogConfig:
    """Iterative classification settings.

    The first round uses the generous global threshold eps_global, later
    rounds the tight local threshold eps_local; rounds stop once a model
    gathers fewer than min_inliers points or max_models is reached.
    """

    eps_global: float = 8.0
    eps_local: float = 3.0
    min_inliers: int = 30
    max_models: int = 10
    ransac_iters: int = 1000
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.eps_global <= 0.0 or self.eps_local <= 0.0:
            raise ValueError("thresholds must be positive")
        if self.min_inliers < 4 or self.max_models < 1 or self.ransac_iters < 1:
            raise ValueError("min_inliers >= 4, max_models >= 1, ransac_iters >= 1")


def multi_homography_classify(
    src: np.ndarray, dst: np.ndarray, cfg: MultiHomogConfig | None = None
) -> tuple[np.ndarray, list[HomographyMap]]:
    """Assign correspondences to homographies by repeated RANSAC.

    Round t runs RANSAC on the still-unassigned points (threshold eps_global
    for the first round, eps_local afterwards); its inliers get label t and
    leave the pool. Rounds stop when a model collects fewer than min_inliers
    inliers or max_models is reached. Label 0 marks unassigned points.
    Returns (labels, models) with one model per positive label.
    """
    cfg = cfg or MultiHomogConfig()
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = src.shape[0]
    if dst.shape[0] != n:
        raise LengthMismatch(f"{n} source points vs {dst.shape[0]} target points")
    if n < cfg.min_inliers:
        raise TooFewPoints(f"need >= {cfg.min_inliers} correspondences, got {n}")
    labels = np.zeros(n, dtype=np.int64)
    models: list[HomographyMap] = []
    unassigned = np.arange(n)
    for t in range(1, cfg.max_models + 1):
        if unassigned.shape[0] < cfg.min_inliers:
            break
        eps = cfg.eps_global if t == 1 else cfg.eps_local
        try:
            model, mask = estimate_homography_ransac(
                src[unassigned],
                dst[unassigned],
                eps=eps,
                iters=cfg.ransac_iters,
                rng_seed=cfg.rng_seed + (t - 1),
            )
        except Degenerate:
            break
        if int(mask.sum()) < cfg.min_inliers:
            break
        labels[unassigned[mask]] = t
        models.append(model)
        unassigned = unassigned[~mask]
    return labels, models


# ---------------------------------------------------------------------------
# Delimited formats.


def read_correspondences_csv(path: str) -> tuple[np.ndarray, np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Read correspondences with header xs,ys,xt,yt and optional ms,mt.

    Returns (src (N,2), dst (N,2), ms, mt) with ms/mt None when absent.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:4]] != ["xs", "ys", "xt", "yt"]:
            raise ValueError(f"{path}: expected header xs,ys,xt,yt[,ms,mt]")
        has_conf = len(header) >= 6 and [h.strip() for h in header[4:6]] == ["ms", "mt"]
        rows = [[float(cell) for cell in row] for row in reader if row]
    data = np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)
    src = data[:, 0:2]
    dst = data[:, 2:4]
    if has_conf:
        return src, dst, data[:, 4], data[:, 5]
    return src, dst, None, None


def write_labels_csv(path: str, labels: np.ndarray) -> None:
    """Write per-correspondence labels with header index,label."""
    lines = ["index,label"]
    for i, lab in enumerate(np.asarray(labels).reshape(-1)):
        lines.append(f"{i},{int(lab)}")
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def write_homographies_json(path: str, models: list[HomographyMap]) -> None:
    """Write models as a JSON list of row-major 9-number arrays (h33 = 1)."""
    payload = [[float(x) for x in m.matrix.reshape(-1)] for m in models]
    text = json.dumps(payload, indent=2) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))
