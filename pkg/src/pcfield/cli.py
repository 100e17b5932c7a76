"""Command line interface.

Subcommands: synth, encode, pcf, eval, multihomog, flags. Numeric settings
resolve with precedence CLI flag > environment variable (prefix PCF_) >
config file ("key = value" lines) > built-in default. All outputs are
written atomically and are byte-identical across reruns with the same seeds.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O failure,
4 pipeline produced only fallback systems.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import bcs_builder, downstream, flowfield, geometry, pcf as pcfmod, probmodel
from ._io import atomic_write_bytes, load_mask_png, save_mask_png, save_rgb_png
from .errors import PcfError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FALLBACK = 4

ENV_PREFIX = "PCF_"

LABEL_PALETTE = [
    (64, 64, 64),  # label 0: unassigned
    (230, 25, 75),
    (60, 180, 75),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 190),
    (0, 128, 128),
]


@dataclass
class RunConfig:
    k: int = 9
    max_reselect: int = 5
    gamma: float = 0.03
    radius_r: float = 1.0
    delta_plus: float = 1.0
    delta_minus: float = 11.0
    margin: float = 2.0
    threshold: float = 0.5
    patch: int = 8
    max_systems: int = 2
    seed: int = 0
    noise: float = 0.0
    eps_global: float = 8.0
    eps_local: float = 3.0
    min_inliers: int = 30
    max_models: int = 10
    iters: int = 1000
    stride: int = 4


class ConfigError(ValueError):
    pass


def _parse_config_file(path: str) -> dict[str, str]:
    known = {f.name for f in fields(RunConfig)}
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            key = key.strip()
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = value.strip()
    return out


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge flag, environment, config-file, and default values."""
    file_cfg: dict[str, str] = {}
    if getattr(args, "config", None):
        file_cfg = _parse_config_file(args.config)
    values = {}
    for f in fields(RunConfig):
        cast = type(f.default)
        flag_val = getattr(args, f.name, None)
        if flag_val is not None:
            values[f.name] = flag_val
            continue
        env_val = os.environ.get(ENV_PREFIX + f.name.upper())
        if env_val is not None:
            source = env_val
        elif f.name in file_cfg:
            source = file_cfg[f.name]
        else:
            values[f.name] = f.default
            continue
        try:
            values[f.name] = cast(source)
        except ValueError as exc:
            raise ConfigError(f"bad value for {f.name}: {source!r}") from exc
    cfg = RunConfig(**values)
    if cfg.k < 3 or cfg.k % 2 == 0:
        raise ConfigError(f"k must be odd and >= 3, got {cfg.k}")
    if not 0.0 <= cfg.threshold <= 1.0:
        raise ConfigError(f"threshold must be in [0, 1], got {cfg.threshold}")
    if cfg.patch < 1 or cfg.max_systems < 1 or cfg.stride < 1:
        raise ConfigError("patch, max_systems, stride must be >= 1")
    return cfg


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w_str, h_str = text.lower().split("x")
        w, h = int(w_str), int(h_str)
    except ValueError as exc:
        raise ConfigError(f"size must look like 256x192, got {text!r}") from exc
    if w < 1 or h < 1:
        raise ConfigError(f"size must be positive, got {text!r}")
    return w, h


def _parse_homography(text: str) -> flowfield.HomographyMap:
    if text == "identity":
        return flowfield.HomographyMap.identity()
    if text.startswith("translate:"):
        try:
            tx, ty = (float(t) for t in text[len("translate:"):].split(","))
        except ValueError as exc:
            raise ConfigError(f"expected translate:TX,TY, got {text!r}") from exc
        return flowfield.HomographyMap.translation(tx, ty)
    parts = text.split(",")
    if len(parts) != 9:
        raise ConfigError(
            f"homography must be 'identity', 'translate:TX,TY', or 9 numbers, got {text!r}"
        )
    try:
        nums = [float(t) for t in parts]
    except ValueError as exc:
        raise ConfigError(f"homography entries must be numbers: {text!r}") from exc
    return flowfield.HomographyMap(np.array(nums).reshape(3, 3))


def _parse_rect(text: str) -> tuple[int, int, int, int]:
    try:
        x, y, w, h = (int(t) for t in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"occluder must be X,Y,W,H integers, got {text!r}") from exc
    return x, y, w, h


def _parse_bcs(text: str) -> geometry.Bcs:
    parts = text.split(",")
    if len(parts) != 6:
        raise ConfigError(f"bcs must be ax,ay,bx,by,cx,cy, got {text!r}")
    try:
        ax, ay, bx, by, cx, cy = (float(t) for t in parts)
    except ValueError as exc:
        raise ConfigError(f"bcs entries must be numbers: {text!r}") from exc
    return geometry.Bcs(geometry.Point2(ax, ay), geometry.Point2(bx, by), geometry.Point2(cx, cy))


def _coords_rgb(
    coords: geometry.CoordField, conf: probmodel.ConfidenceField | None
) -> tuple[np.ndarray, dict]:
    """Color dump: lambda1 -> red, lambda2 -> green (affine over the observed
    valid range), confidence -> blue. Returns the image and the mapping."""
    h, w = coords.height, coords.width
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    mapping: dict = {}
    for idx, (name, grid) in enumerate((("lambda1", coords.lambda1), ("lambda2", coords.lambda2))):
        if coords.valid.any():
            vmin = float(grid[coords.valid].min())
            vmax = float(grid[coords.valid].max())
        else:
            vmin = vmax = 0.0
        span = vmax - vmin
        scaled = (grid - vmin) / span * 255.0 if span > 0.0 else np.zeros_like(grid)
        rgb[..., idx] = np.where(coords.valid, np.clip(np.round(scaled), 0, 255), 0).astype(
            np.uint8
        )
        mapping[name] = [vmin, vmax]
    if conf is not None:
        rgb[..., 2] = np.round(255.0 * conf.m).astype(np.uint8)
        mapping["confidence"] = [0.0, 1.0]
    return rgb, mapping


def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> int:
    w, h = _parse_size(args.size)
    hmap = _parse_homography(args.homography)
    occluders = tuple(_parse_rect(r) for r in args.occluder or [])
    os.makedirs(args.out_dir, exist_ok=True)
    fwd = flowfield.synth_flow_homography(
        hmap, w, h, occluders, noise_sigma=cfg.noise, rng_seed=cfg.seed
    )
    bwd = flowfield.synth_flow_homography(
        hmap.inverse(), w, h, noise_sigma=cfg.noise, rng_seed=cfg.seed + 1
    )
    flowfield.write_flo(os.path.join(args.out_dir, "fwd.flo"), fwd)
    flowfield.write_flo(os.path.join(args.out_dir, "bwd.flo"), bwd)
    save_mask_png(os.path.join(args.out_dir, "valid.png"), fwd.valid)
    manifest = {
        "width": w,
        "height": h,
        "homography": [float(x) for x in hmap.matrix.reshape(-1)],
        "occluders": [list(r) for r in occluders],
        "noise_sigma": cfg.noise,
        "seed": cfg.seed,
    }
    atomic_write_bytes(
        os.path.join(args.out_dir, "manifest.json"),
        (json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode("utf-8"),
    )
    return EXIT_OK


def cmd_encode(args: argparse.Namespace, cfg: RunConfig) -> int:
    w, h = _parse_size(args.size)
    bcs = _parse_bcs(args.bcs)
    field = geometry.encode_field(w, h, bcs)
    geometry.save_coord_field(args.out, field)
    if args.png:
        rgb, _ = _coords_rgb(field, None)
        save_rgb_png(args.png, rgb)
    return EXIT_OK


def cmd_pcf(args: argparse.Namespace, cfg: RunConfig) -> int:
    fwd = flowfield.read_flo(args.fwd)
    bwd = flowfield.read_flo(args.bwd)
    builder = bcs_builder.BuilderConfig(k=cfg.k, max_reselect=cfg.max_reselect, rng_seed=cfg.seed)
    constraints = probmodel.GmmConstraints(
        delta_plus=cfg.delta_plus,
        delta_minus=cfg.delta_minus,
        margin=cfg.margin,
        radius_r=cfg.radius_r,
    )
    pset = pcfmod.build_pcf_set(
        fwd,
        bwd,
        builder,
        constraints,
        max_systems=cfg.max_systems,
        patch_size=cfg.patch,
        threshold=cfg.threshold,
    )
    pcfmod.save_pcf_set(args.out_dir, pset)
    total = float(fwd.height * fwd.width)
    report_entries = []
    for idx, entry in enumerate(pset.entries):
        rgb, mapping = _coords_rgb(entry.pcf.coords, entry.pcf.confidence)
        save_rgb_png(os.path.join(args.out_dir, f"entry_{idx}", "coords_rgb.png"), rgb)
        report_entries.append(
            {
                "index": idx,
                "fallback": entry.fallback,
                "origin": (
                    [entry.bcs.target.origin.x, entry.bcs.target.origin.y]
                    if entry.bcs is not None
                    else None
                ),
                "mean_confidence": float(entry.pcf.confidence.m.mean()),
                "reliable_fraction": float(entry.reliable.sum() / total),
                "color_map": mapping,
            }
        )
    report = {
        "entries": report_entries,
        "union_coverage": float(pset.union_reliable.sum() / total),
        "settings": {
            "k": cfg.k,
            "patch": cfg.patch,
            "max_systems": cfg.max_systems,
            "threshold": cfg.threshold,
            "seed": cfg.seed,
        },
    }
    atomic_write_bytes(
        os.path.join(args.out_dir, "report.json"),
        (json.dumps(report, sort_keys=True, indent=2) + "\n").encode("utf-8"),
    )
    if all(entry.fallback for entry in pset.entries):
        print("every system fell back; coordinates are Cartesian passthrough", file=sys.stderr)
        return EXIT_FALLBACK
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    pset = pcfmod.load_pcf_set(args.pcf_dir)
    gt = load_mask_png(args.gt_mask)
    union = np.zeros_like(gt, dtype=bool)
    print("count,iou")
    for idx, entry in enumerate(pset.entries, start=1):
        if entry.reliable.shape != gt.shape:
            raise ConfigError(
                f"entry {idx - 1} is {entry.reliable.shape}, ground truth is {gt.shape}"
            )
        union |= entry.reliable
        print(f"{idx},{pcfmod.coverage_iou(union, gt):.6f}")
    return EXIT_OK


def _correspondences_from_flow(
    flow: flowfield.FlowField, stride: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0 : flow.height : stride, 0 : flow.width : stride]
    keep = flow.valid[ys, xs]
    xs, ys = xs[keep], ys[keep]
    src = np.stack([xs + flow.u[ys, xs], ys + flow.v[ys, xs]], axis=1)
    dst = np.stack([xs, ys], axis=1).astype(np.float64)
    return src, dst, np.stack([xs, ys], axis=1)


def cmd_multihomog(args: argparse.Namespace, cfg: RunConfig) -> int:
    mh_cfg = downstream.MultiHomogConfig(
        eps_global=cfg.eps_global,
        eps_local=cfg.eps_local,
        min_inliers=cfg.min_inliers,
        max_models=cfg.max_models,
        ransac_iters=cfg.iters,
        rng_seed=cfg.seed,
    )
    pixels = None
    flow = None
    if args.input:
        src, dst, _, _ = downstream.read_correspondences_csv(args.input)
    else:
        flow = flowfield.read_flo(args.flow)
        src, dst, pixels = _correspondences_from_flow(flow, cfg.stride)
    labels, models = downstream.multi_homography_classify(src, dst, mh_cfg)
    downstream.write_labels_csv(args.labels_out, labels)
    downstream.write_homographies_json(args.models_out, models)
    if args.png:
        if flow is None or pixels is None:
            raise ConfigError("--png requires dense --flow input")
        img = np.zeros((flow.height, flow.width, 3), dtype=np.uint8)
        colors = np.array(
            [LABEL_PALETTE[int(l) % len(LABEL_PALETTE)] for l in labels], dtype=np.uint8
        )
        img[pixels[:, 1], pixels[:, 0]] = colors
        save_rgb_png(args.png, img)
    return EXIT_OK


def cmd_flags(args: argparse.Namespace, cfg: RunConfig) -> int:
    src, dst, ms, mt = downstream.read_correspondences_csv(args.input)
    if ms is None or mt is None:
        raise ConfigError(f"{args.input}: flags need the ms,mt confidence columns")
    systems = [(src, dst, ms, mt)]
    if args.input2:
        src2, dst2, ms2, mt2 = downstream.read_correspondences_csv(args.input2)
        if ms2 is None or mt2 is None:
            raise ConfigError(f"{args.input2}: flags need the ms,mt confidence columns")
        if src2.shape[0] != src.shape[0]:
            raise ConfigError("both inputs must describe the same correspondences")
        systems.append((src2, dst2, ms2, mt2))
    flags_cols = []
    first = None
    for s, d, cs, ct in systems:
        s_n, _, _ = geometry.zero_score_normalize(s)
        d_n, _, _ = geometry.zero_score_normalize(d)
        xs = downstream.SparseCoords(s_n, cs)
        xt = downstream.SparseCoords(d_n, ct)
        if first is None:
            first = (xs, xt)
        flags_cols.append(downstream.filter_flags(xs, xt))
    assert first is not None
    rows = downstream.assemble_filter_input(first[0], first[1], flags_cols)
    lines = ["index,xs1,xs2,xt1,xt2,tau1,tau2"]
    for i in range(rows.shape[0]):
        lines.append(str(i) + "," + ",".join(f"{val:.9g}" for val in rows[i]))
    atomic_write_bytes(args.out, ("\n".join(lines) + "\n").encode("utf-8"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file with 'key = value' lines")
    common.add_argument("--seed", type=int, help="rng seed (default 0)")

    parser = argparse.ArgumentParser(
        prog="pcfield", description="probabilistic coordinate field tools"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="synthesize a flow pair")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--size", required=True, help="WxH, e.g. 256x192")
    p.add_argument(
        "--homography",
        required=True,
        help="'identity', 'translate:TX,TY', or 9 comma-separated numbers",
    )
    p.add_argument("--occluder", action="append", help="X,Y,W,H rectangle, repeatable")
    p.add_argument("--noise", type=float, help="flow noise std (default 0)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("encode", parents=[common], help="encode a coordinate field")
    p.add_argument("--size", required=True, help="WxH")
    p.add_argument("--bcs", required=True, help="ax,ay,bx,by,cx,cy")
    p.add_argument("--out", required=True, help="output .cfld path")
    p.add_argument("--png", help="optional color dump path")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("pcf", parents=[common], help="build a PCF set from a flow pair")
    p.add_argument("--fwd", required=True, help="forward .flo (target frame)")
    p.add_argument("--bwd", required=True, help="backward .flo (source frame)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--k", type=int, help="pooling window (odd, default 9)")
    p.add_argument("--max-reselect", dest="max_reselect", type=int)
    p.add_argument("--patch", type=int, help="confidence patch size (default 8)")
    p.add_argument("--max-systems", dest="max_systems", type=int)
    p.add_argument("--threshold", type=float, help="reliability threshold (default 0.5)")
    p.add_argument("--gamma", type=float)
    p.add_argument("--radius-r", dest="radius_r", type=float)
    p.add_argument("--delta-plus", dest="delta_plus", type=float)
    p.add_argument("--delta-minus", dest="delta_minus", type=float)
    p.add_argument("--margin", type=float)
    p.set_defaults(func=cmd_pcf)

    p = sub.add_parser("eval", parents=[common], help="cumulative coverage IoU vs a mask")
    p.add_argument("--pcf-dir", required=True)
    p.add_argument("--gt-mask", required=True, help="ground-truth mask PNG")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("multihomog", parents=[common], help="classify correspondences")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--input", help="correspondences CSV (xs,ys,xt,yt[,ms,mt])")
    group.add_argument("--flow", help="dense forward .flo input")
    p.add_argument("--labels-out", required=True, help="labels CSV path")
    p.add_argument("--models-out", required=True, help="homographies JSON path")
    p.add_argument("--png", help="label-colored PNG (dense input only)")
    p.add_argument("--stride", type=int, help="dense sampling stride (default 4)")
    p.add_argument("--eps-global", dest="eps_global", type=float)
    p.add_argument("--eps-local", dest="eps_local", type=float)
    p.add_argument("--min-inliers", dest="min_inliers", type=int)
    p.add_argument("--max-models", dest="max_models", type=int)
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_multihomog)

    p = sub.add_parser("flags", parents=[common], help="consistency flags for matches")
    p.add_argument("--input", required=True, help="correspondences CSV with ms,mt")
    p.add_argument("--input2", help="second-system correspondences CSV")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_flags)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_run_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        return int(args.func(args, cfg))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PcfError as exc:
        from .errors import BadMagic, TruncatedFile

        if isinstance(exc, (BadMagic, TruncatedFile)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
