"""Coordinate fields paired with confidence, and multi-system coverage.

A Pcf couples a (typically warped) coordinate field with a per-pixel
confidence map. Soft assembly scales the coordinates by the confidence; hard
assembly zeroes coordinates below a confidence threshold and binarizes the
map. A PcfSet stacks several systems built iteratively, each new origin
excluded from the regions already covered, so the union of reliable regions
grows monotonically.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, replace

import numpy as np

from ._io import atomic_write_bytes, load_mask_png, save_mask_png
from .bcs_builder import (
    BcsPair,
    BuilderConfig,
    Fallback,
    _disk_mask,
    build_with_reselection,
)
from .errors import DimMismatch
from .flowfield import FlowField, warp_field
from .geometry import (
    Bcs,
    CoordField,
    Point2,
    encode_field,
    load_coord_field,
    save_coord_field,
)
from .probmodel import (
    ConfidenceField,
    GmmConstraints,
    OptimizerConfig,
    confidence_field_from_flow_pair,
    load_confidence_field,
    save_confidence_field,
)

HARD = "hard"
SOFT = "soft"
DEFAULT_THRESHOLD = 0.5
MIN_COVERAGE_GAIN = 0.01


@dataclass
class Pcf:
    """A coordinate field with its confidence, in soft or hard form."""

    coords: CoordField
    confidence: ConfidenceField
    mode: str
    threshold: float = DEFAULT_THRESHOLD


@dataclass
class PcfEntry:
    """One system of a PcfSet. Fallback entries carry no coordinate pair."""

    bcs: BcsPair | None
    pcf: Pcf
    fallback: bool

    @property
    def reliable(self) -> np.ndarray:
        """Binarized reliable region of this entry."""
        return self.pcf.confidence.m >= self.pcf.threshold


@dataclass
class PcfSet:
    """Ordered list of systems plus the union of their reliable regions."""

    entries: list[PcfEntry]
    union_reliable: np.ndarray


def assemble_pcf(
    coords: CoordField,
    conf: ConfidenceField,
    mode: str = HARD,
    threshold: float = DEFAULT_THRESHOLD,
) -> Pcf:
    """Combine a coordinate field with confidence.

    soft: coordinates are scaled elementwise by the confidence map.
    hard: coordinates are kept where confidence >= threshold and zeroed
    elsewhere; the confidence map is binarized to {0, 1}. Hard assembly is
    idempotent: assembling an already-hard Pcf changes nothing.
    """
    if (coords.width, coords.height) != (conf.width, conf.height):
        raise DimMismatch(
            f"coords are {coords.width}x{coords.height}, confidence is "
            f"{conf.width}x{conf.height}"
        )
    if mode == SOFT:
        l1 = conf.m * coords.lambda1
        l2 = conf.m * coords.lambda2
        out_conf = ConfidenceField(conf.width, conf.height, conf.m.copy())
    elif mode == HARD:
        keep = conf.m >= threshold
        l1 = np.where(keep, coords.lambda1, 0.0)
        l2 = np.where(keep, coords.lambda2, 0.0)
        out_conf = ConfidenceField(conf.width, conf.height, keep.astype(np.float64))
    else:
        raise ValueError(f"mode must be '{SOFT}' or '{HARD}', got {mode!r}")
    out_coords = CoordField(coords.width, coords.height, l1, l2, coords.valid.copy())
    return Pcf(out_coords, out_conf, mode, threshold)


def cartesian_coord_field(
    width: int, height: int, valid: np.ndarray | None = None
) -> CoordField:
    """Raw pixel coordinates (x, y) as a coordinate field, the fallback payload."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return CoordField(width, height, xs, ys, valid)


def coverage_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks; 1.0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimMismatch(f"masks have shapes {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def build_pcf_set(
    flow_fwd: FlowField,
    flow_bwd: FlowField,
    cfg: BuilderConfig | None = None,
    constraints: GmmConstraints | None = None,
    max_systems: int = 2,
    patch_size: int = 8,
    opt: OptimizerConfig | None = None,
    threshold: float = DEFAULT_THRESHOLD,
) -> PcfSet:
    """Build up to max_systems hard PCFs covering the target frame.

    The flow-residual confidence map is fitted once. Each round builds a
    coordinate pair (with re-selection; origins are excluded from previously
    reliable regions and earlier origin disks), encodes the source system,
    warps it onto the target grid, masks the confidence to the warp's valid
    region and away from previously covered pixels, and assembles a hard Pcf.
    Rounds where re-selection falls back contribute a Cartesian-passthrough
    entry with zero confidence. Building stops at max_systems or as soon as a
    round grows the union of reliable regions by less than 1% of the pixels.
    """
    cfg = cfg or BuilderConfig()
    constraints = constraints or GmmConstraints()
    h, w = flow_fwd.height, flow_fwd.width
    _, conf_flow = confidence_field_from_flow_pair(
        flow_fwd, flow_bwd, patch_size, constraints, opt
    )
    union = np.zeros((h, w), dtype=bool)
    origin_excl = np.zeros((h, w), dtype=bool)
    entries: list[PcfEntry] = []
    radius = (cfg.k - 1) / 2.0
    total = float(h * w)

    def probe(pair: BcsPair) -> float:
        warped = warp_field(encode_field(w, h, pair.source), flow_fwd)
        return float(np.mean(conf_flow.m * warped.valid))

    for n in range(max_systems):
        round_cfg = replace(cfg, rng_seed=cfg.rng_seed + n)
        result = build_with_reselection(
            flow_fwd, round_cfg, probe, exclusion=union | origin_excl
        )
        prev_covered = int(union.sum())
        if isinstance(result, Fallback):
            coords = cartesian_coord_field(w, h, flow_fwd.valid)
            conf = ConfidenceField(w, h, np.zeros((h, w)))
            entries.append(PcfEntry(None, assemble_pcf(coords, conf, HARD, threshold), True))
        else:
            warped = warp_field(encode_field(w, h, result.source), flow_fwd)
            m = np.where(warped.valid & ~union, conf_flow.m, 0.0)
            hard = assemble_pcf(warped, ConfidenceField(w, h, m), HARD, threshold)
            entries.append(PcfEntry(result, hard, False))
            union |= hard.confidence.m >= 1.0
            origin_excl |= _disk_mask((h, w), result.target.origin, radius)
        gain = int(union.sum()) - prev_covered
        if gain < MIN_COVERAGE_GAIN * total:
            break
    return PcfSet(entries, union)


# ---------------------------------------------------------------------------
# Directory layout: entry_<n>/{coords.cfld, conf.cfld, bcs.json} + union.png.


def _bcs_to_json(bcs: Bcs) -> dict:
    return {
        "a": [bcs.a.x, bcs.a.y],
        "b": [bcs.b.x, bcs.b.y],
        "c": [bcs.c.x, bcs.c.y],
    }


def _bcs_from_json(obj: dict) -> Bcs:
    return Bcs(
        Point2(*(float(t) for t in obj["a"])),
        Point2(*(float(t) for t in obj["b"])),
        Point2(*(float(t) for t in obj["c"])),
    )


def save_pcf_set(dirpath: str, pset: PcfSet) -> None:
    os.makedirs(dirpath, exist_ok=True)
    for idx, entry in enumerate(pset.entries):
        edir = os.path.join(dirpath, f"entry_{idx}")
        os.makedirs(edir, exist_ok=True)
        save_coord_field(os.path.join(edir, "coords.cfld"), entry.pcf.coords)
        save_confidence_field(os.path.join(edir, "conf.cfld"), entry.pcf.confidence)
        meta: dict = {
            "fallback": entry.fallback,
            "mode": entry.pcf.mode,
            "threshold": entry.pcf.threshold,
        }
        if entry.bcs is not None:
            meta["source"] = _bcs_to_json(entry.bcs.source)
            meta["target"] = _bcs_to_json(entry.bcs.target)
        payload = json.dumps(meta, sort_keys=True, indent=2) + "\n"
        atomic_write_bytes(os.path.join(edir, "bcs.json"), payload.encode("utf-8"))
    save_mask_png(os.path.join(dirpath, "union.png"), pset.union_reliable)


def load_pcf_set(dirpath: str) -> PcfSet:
    pattern = re.compile(r"^entry_(\d+)$")
    found = []
    for name in os.listdir(dirpath):
        m = pattern.match(name)
        if m:
            found.append((int(m.group(1)), name))
    entries: list[PcfEntry] = []
    for _, name in sorted(found):
        edir = os.path.join(dirpath, name)
        coords = load_coord_field(os.path.join(edir, "coords.cfld"))
        conf = load_confidence_field(os.path.join(edir, "conf.cfld"))
        with open(os.path.join(edir, "bcs.json"), "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        bcs = None
        if "source" in meta and "target" in meta:
            bcs = BcsPair(_bcs_from_json(meta["source"]), _bcs_from_json(meta["target"]))
        pcf = Pcf(coords, conf, meta.get("mode", HARD), float(meta.get("threshold", 0.5)))
        entries.append(PcfEntry(bcs, pcf, bool(meta.get("fallback", False))))
    union = load_mask_png(os.path.join(dirpath, "union.png"))
    return PcfSet(entries, union)
