"""Acceptance suite: one test per shipping criterion.

Each test checks an end-to-end requirement at its stated tolerance and, where
one applies, its runtime budget, then prints a single PASS line. Oracles are
local to this file: numeric quadrature, finite differences, brute-force
counting, and planted synthetic scenes whose expected answers never come from
the code paths under test.
"""

import math
import os
import time

import numpy as np
import numpy.testing as npt
from scipy.integrate import quad

from pcfield.bcs_builder import (
    BuilderConfig,
    Fallback,
    build_with_reselection,
    flow_density,
)
from pcfield.cli import main
from pcfield.downstream import (
    MultiHomogConfig,
    SparseCoords,
    filter_flags,
    masked_attention,
    multi_homography_classify,
)
from pcfield.flowfield import FlowField, HomographyMap, synth_flow_homography
from pcfield.geometry import (
    AffineMap,
    Bcs,
    Point2,
    apply_affine,
    bary_coords,
    signed_area,
    transform_bcs,
)
from pcfield.pcf import (
    HARD,
    assemble_pcf,
    build_pcf_set,
    cartesian_coord_field,
    coverage_iou,
)
from pcfield.probmodel import (
    ConfidenceField,
    GmmConstraints,
    confidence,
    constrain,
    fit_params,
    nll,
    nll_gradient,
)


def report(num, text, elapsed=None):
    suffix = f" ({elapsed:.2f}s)" if elapsed is not None else ""
    print(f"[criterion {num:2d}] PASS {text}{suffix}")


# ---------------------------------------------------------------------------
# 1. Barycentric coordinates are invariant under invertible affine maps.


def random_affine(rng):
    while True:
        lin = rng.normal(0.0, 1.0, size=(2, 2))
        if abs(np.linalg.det(lin)) > 0.2:
            return AffineMap(lin, rng.normal(0.0, 5.0, size=2))


def random_bcs(rng, span=10.0):
    while True:
        tri = [Point2(*pt) for pt in rng.uniform(-span, span, size=(3, 2))]
        if abs(signed_area(*tri)) > 0.5:
            return Bcs(*tri)


def test_affine_invariance_of_barycentric_coordinates():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        bcs = random_bcs(rng)
        m = random_affine(rng)
        p = Point2(*rng.uniform(-20.0, 20.0, size=2))
        before = bary_coords(p, bcs).as_array()
        after = bary_coords(apply_affine(m, p), transform_bcs(m, bcs)).as_array()
        worst = max(worst, float(np.max(np.abs(after - before))))
    elapsed = time.perf_counter() - start
    assert worst <= 1e-9, f"worst coordinate drift {worst}"
    assert elapsed < 1.0
    report(1, f"coordinates invariant over 1000 random affine maps, worst drift {worst:.1e}", elapsed)


# ---------------------------------------------------------------------------
# 2. Closed-form confidence equals the numeric disk integral of the mixture.


def mixture_disk_mass_numeric(params, radius):
    """Polar quadrature of the isotropic mixture's mass inside the disk."""

    def component(var):
        val, _ = quad(lambda r: r / var * math.exp(-r * r / (2.0 * var)), 0.0, radius)
        return val

    a = params.alpha_plus
    return a * component(params.sigma_plus_sq) + (1.0 - a) * component(
        params.sigma_minus_sq
    )


def test_confidence_matches_numeric_disk_integral():
    rng = np.random.default_rng(102)
    c = GmmConstraints()
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        params = constrain(*rng.uniform(-4.0, 4.0, size=3), c)
        radius = float(rng.uniform(0.5, 2.0))
        got = confidence(params, radius)
        want = mixture_disk_mass_numeric(params, radius)
        worst = max(worst, abs(got - want))
    elapsed = time.perf_counter() - start
    assert worst <= 1e-3, f"worst disk-mass error {worst}"
    assert elapsed < 30.0
    report(2, f"closed form within {worst:.1e} of quadrature on 100 parameter draws", elapsed)


# ---------------------------------------------------------------------------
# 3. The reparameterization never leaves the feasible chain.


def test_constraint_chain_never_violated():
    c = GmmConstraints()
    assert (c.delta_plus, c.delta_minus, c.margin) == (1.0, 11.0, 2.0)
    rng = np.random.default_rng(103)
    raws = np.concatenate(
        [
            rng.normal(0.0, 1.0, size=(40000, 3)),
            rng.normal(0.0, 8.0, size=(40000, 3)),
            rng.normal(0.0, 60.0, size=(19999, 3)),
            np.zeros((1, 3)),
        ]
    )
    assert raws.shape[0] == 100000
    start = time.perf_counter()
    alpha = np.empty(raws.shape[0])
    sp = np.empty(raws.shape[0])
    sm = np.empty(raws.shape[0])
    for i, (ra, rsp, rsm) in enumerate(raws):
        params = constrain(float(ra), float(rsp), float(rsm), c)
        alpha[i] = params.alpha_plus
        sp[i] = params.sigma_plus_sq
        sm[i] = params.sigma_minus_sq
    elapsed = time.perf_counter() - start
    lo = c.delta_plus + c.margin
    bad = (
        (alpha < 0.0)
        | (alpha > 1.0)
        | (sp < 0.0)
        | (sp > c.delta_plus)
        | (sm < lo)
        | (sm >= c.delta_minus)
    )
    assert not bad.any(), f"{int(bad.sum())} chain violations"
    assert elapsed < 5.0
    report(3, "0 violations of 0 <= sp <= 1 < 3 <= sm < 11 over 100000 raw triples", elapsed)


# ---------------------------------------------------------------------------
# 4. Analytic NLL gradients agree with central finite differences.


def test_gradient_matches_central_differences():
    c = GmmConstraints()
    rng = np.random.default_rng(104)
    step = 1e-5
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(8, 48))
        mu = rng.normal(0.0, 3.0, size=(n, 2))
        x = mu + rng.normal(0.0, 1.5, size=(n, 2))
        raw = tuple(float(t) for t in rng.uniform(-2.0, 2.0, size=3))
        _, grad = nll_gradient(x, mu, raw, c)
        for i in range(3):
            hi = list(raw)
            lo = list(raw)
            hi[i] += step
            lo[i] -= step
            numeric = (
                nll(x, mu, constrain(*hi, c)) - nll(x, mu, constrain(*lo, c))
            ) / (2.0 * step)
            worst = max(worst, abs(grad[i] - numeric) / max(1.0, abs(numeric)))
    elapsed = time.perf_counter() - start
    assert worst <= 1e-5, f"worst relative gradient error {worst}"
    assert elapsed < 5.0
    report(4, f"analytic gradient within {worst:.1e} relative of finite differences, 50 instances", elapsed)


# ---------------------------------------------------------------------------
# 5. Fitting recovers planted mixture parameters.


def test_planted_mixture_recovery():
    rng = np.random.default_rng(105)
    n = 10000
    alpha, var_plus, var_minus = 0.7, 0.8, 9.0
    from_plus = rng.random(n) < alpha
    sigma = np.where(from_plus, math.sqrt(var_plus), math.sqrt(var_minus))
    mu = rng.normal(0.0, 5.0, size=(n, 2))
    x = mu + rng.normal(0.0, 1.0, size=(n, 2)) * sigma[:, None]
    start = time.perf_counter()
    params = fit_params(x, mu)
    elapsed = time.perf_counter() - start
    assert abs(params.alpha_plus - alpha) <= 0.05
    assert abs(params.sigma_plus_sq - var_plus) <= 0.15 * var_plus
    assert abs(params.sigma_minus_sq - var_minus) <= 0.15 * var_minus
    assert elapsed < 10.0
    report(
        5,
        f"fit ({params.alpha_plus:.3f}, {params.sigma_plus_sq:.3f}, "
        f"{params.sigma_minus_sq:.2f}) against planted (0.7, 0.8, 9.0)",
        elapsed,
    )


# ---------------------------------------------------------------------------
# 6. Reliable-union coverage tracks the valid-and-clean ground truth.


def test_reliable_union_matches_clean_valid_ground_truth():
    size = 256
    h = HomographyMap(
        np.array([[1.05, 0.0, -6.4], [0.0, 1.05, -6.4], [0.0, 0.0, 1.0]])
    )
    occluders = (
        (10, 10, 40, 35),
        (70, 120, 40, 35),
        (130, 30, 40, 35),
        (190, 150, 40, 35),
        (40, 190, 40, 35),
        (150, 210, 40, 35),
        (210, 60, 40, 35),
    )
    fwd = synth_flow_homography(h, size, size, occluders)
    bwd = synth_flow_homography(h.inverse(), size, size)
    occluded_frac = 1.0 - fwd.valid.mean()
    assert abs(occluded_frac - 0.15) < 0.01

    # Per-pixel corruption confined to the bottom-right quadrant, which is
    # aligned with the 8-pixel confidence patch grid.
    corrupt = np.zeros((size, size), dtype=bool)
    corrupt[128:, 128:] = True
    rng = np.random.default_rng(106)
    u = np.where(corrupt, fwd.u + rng.normal(0.0, 5.0, size=(size, size)), fwd.u)
    v = np.where(corrupt, fwd.v + rng.normal(0.0, 5.0, size=(size, size)), fwd.v)
    fwd = FlowField(size, size, u, v, fwd.valid)
    gt = fwd.valid & ~corrupt

    start = time.perf_counter()
    one = build_pcf_set(fwd, bwd, BuilderConfig(k=9, rng_seed=0), max_systems=1)
    two = build_pcf_set(fwd, bwd, BuilderConfig(k=9, rng_seed=0), max_systems=2)
    elapsed = time.perf_counter() - start

    assert not one.entries[0].fallback
    iou_one = coverage_iou(one.union_reliable, gt)
    iou_two = coverage_iou(two.union_reliable, gt)
    assert iou_one >= 0.85, f"coverage IoU with one system: {iou_one}"
    assert iou_two >= iou_one, f"IoU fell from {iou_one} to {iou_two}"
    assert elapsed < 60.0
    report(6, f"coverage IoU {iou_one:.3f} with one system, {iou_two:.3f} with two", elapsed)


# ---------------------------------------------------------------------------
# 7. A probe that rejects everything exhausts re-selection, and the fallback
#    hard assembly carries no coordinates.


def test_rejection_exhausts_reselection_and_falls_back_to_zeros():
    flow = synth_flow_homography(HomographyMap.identity(), 32, 32)
    cfg = BuilderConfig(k=5, max_reselect=5, rng_seed=0)
    probed = []

    def reject_all(pair):
        probed.append(pair)
        return 0.0

    out = build_with_reselection(flow, cfg, reject_all)
    assert isinstance(out, Fallback)
    assert out.attempts == cfg.max_reselect + 1
    # every attempt produced a complete pair before the probe turned it down
    assert len(probed) == cfg.max_reselect + 1

    conf = ConfidenceField(32, 32, np.zeros((32, 32)))
    hard = assemble_pcf(cartesian_coord_field(32, 32, flow.valid), conf, HARD)
    assert not hard.coords.lambda1.any()
    assert not hard.coords.lambda2.any()
    assert not hard.confidence.m.any()

    # the full pipeline takes the same path when no probe can ever pass
    hopeless = synth_flow_homography(HomographyMap.translation(100.0, 0.0), 16, 16)
    hopeless_bwd = synth_flow_homography(HomographyMap.translation(-100.0, 0.0), 16, 16)
    pset = build_pcf_set(
        hopeless, hopeless_bwd, BuilderConfig(k=5, rng_seed=0), max_systems=2
    )
    assert pset.entries and all(e.fallback for e in pset.entries)
    entry = pset.entries[0]
    assert not entry.pcf.coords.lambda1.any()
    assert not entry.pcf.coords.lambda2.any()
    assert not entry.pcf.confidence.m.any()
    assert not pset.union_reliable.any()
    report(7, f"{len(probed)} builds probed before Fallback; fallback hard PCF is all zero")


# ---------------------------------------------------------------------------
# 8. Masked attention limits: all-ones masks and zeroed query rows.


def softmax_rows(z):
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def test_masked_attention_reduces_to_standard_and_to_column_means():
    rng = np.random.default_rng(108)
    q = rng.normal(size=(6, 8))
    k = rng.normal(size=(10, 8))
    v = rng.normal(size=(10, 5))
    got = masked_attention(q, k, v, np.ones(6), np.ones(10))
    want = softmax_rows(q @ k.T / math.sqrt(8)) @ v
    gap = float(np.max(np.abs(got - want)))
    assert gap <= 1e-12

    # L = 4 keys and integer values make the uniform row exactly representable
    v_int = rng.integers(-9, 10, size=(4, 3)).astype(np.float64)
    k4 = rng.normal(size=(4, 8))
    q3 = rng.normal(size=(3, 8))
    out = masked_attention(q3, k4, v_int, np.array([0.0, 1.0, 0.7]), np.ones(4))
    npt.assert_array_equal(out[0], v_int.mean(axis=0))
    report(8, f"all-ones masks match plain attention within {gap:.1e}; zero-mask row equals the column mean exactly")


# ---------------------------------------------------------------------------
# 9. Consistency flag identities: unit value, sign change, bounds.


def test_filter_flag_unit_value_sign_change_and_bounds():
    same = SparseCoords([[2.0, 3.0]], [1.0])
    assert filter_flags(same, same)[0] == 1.0

    crossover = math.log(3.0)
    origin = SparseCoords([[0.0, 0.0]], [1.0])
    before = filter_flags(origin, SparseCoords([[crossover - 1e-9, 0.0]], [1.0]))[0]
    after = filter_flags(origin, SparseCoords([[crossover + 1e-9, 0.0]], [1.0]))[0]
    assert before > 0.0 > after

    rng = np.random.default_rng(109)
    n = 100000
    xs = SparseCoords(rng.normal(0.0, 50.0, size=(n, 2)), rng.random(n))
    xt = SparseCoords(rng.normal(0.0, 50.0, size=(n, 2)), rng.random(n))
    assert np.all(np.abs(filter_flags(xs, xt)) <= 1.0)
    report(9, "tau(0) = 1 exactly, sign flips inside ln 3 +- 1e-9, |tau| <= 1 on 100000 draws")


# ---------------------------------------------------------------------------
# 10. Three planted homographies on disjoint bands are recovered exactly.

PLANTED_HOMOGRAPHIES = (
    np.array([[1.0, 0.0, 250.0], [0.0, 1.0, -180.0], [0.0, 0.0, 1.0]]),
    np.array([[1.05, 0.03, -300.0], [-0.02, 0.97, 260.0], [1e-5, -5e-6, 1.0]]),
    np.array([[0.96, -0.04, 40.0], [0.05, 1.04, 600.0], [0.0, 0.0, 1.0]]),
)
BANDS = ((0.0, 300.0), (350.0, 650.0), (700.0, 1000.0))


def project(mat, pts):
    homog = np.hstack([pts, np.ones((pts.shape[0], 1))]) @ mat.T
    return homog[:, :2] / homog[:, 2:3]


def planted_scene(seed):
    rng = np.random.default_rng(1000 + seed)
    src_parts, dst_parts, groups = [], [], []
    for g, (mat, (x0, x1)) in enumerate(zip(PLANTED_HOMOGRAPHIES, BANDS), start=1):
        pts = np.stack(
            [rng.uniform(x0, x1, size=600), rng.uniform(0.0, 1000.0, size=600)],
            axis=1,
        )
        src_parts.append(pts)
        dst_parts.append(project(mat, pts))
        groups.append(np.full(600, g))
    src_parts.append(rng.uniform(0.0, 1000.0, size=(200, 2)))
    dst_parts.append(rng.uniform(-500.0, 1500.0, size=(200, 2)))
    groups.append(np.zeros(200))
    return np.concatenate(src_parts), np.concatenate(dst_parts), np.concatenate(groups)


def test_three_planted_homographies_recovered_per_seed():
    start = time.perf_counter()
    accuracies = []
    for seed in (0, 1, 2):
        src, dst, group = planted_scene(seed)
        assert src.shape[0] == 2000
        labels, models = multi_homography_classify(
            src, dst, MultiHomogConfig(rng_seed=seed)
        )
        assert len(models) == 3, f"seed {seed}: found {len(models)} models"
        matched = {}
        for g in (1, 2, 3):
            counts = np.bincount(labels[group == g].astype(int), minlength=4)
            matched[g] = int(np.argmax(counts[1:]) + 1)
        assert sorted(matched.values()) == [1, 2, 3], f"seed {seed}: matching not bijective"
        correct = sum(int(np.sum(labels[group == g] == m)) for g, m in matched.items())
        accuracy = correct / float((group > 0).sum())
        assert accuracy >= 0.99, f"seed {seed}: label accuracy {accuracy}"
        accuracies.append(accuracy)
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0
    report(
        10,
        f"3 models at every seed, label accuracy {min(accuracies):.4f} or better",
        elapsed,
    )


# ---------------------------------------------------------------------------
# 11. Every CLI command is byte-deterministic under identical seeds/inputs.


def read_tree_bytes(root):
    out = {}
    for base, _, files in os.walk(root):
        for name in files:
            path = os.path.join(base, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


def test_cli_reruns_are_byte_identical(tmp_path, capsys):
    def run(*argv):
        return main([str(a) for a in argv])

    compared = 0

    synth_args = (
        "--size", "24x24",
        "--homography", "1.02,0.01,2,0,0.99,-1,0,0,1",
        "--noise", "0.1",
        "--seed", "7",
        "--occluder", "3,4,5,6",
    )
    s1, s2 = tmp_path / "s1", tmp_path / "s2"
    for out in (s1, s2):
        assert run("synth", "--out-dir", out, *synth_args) == 0
    t1, t2 = read_tree_bytes(s1), read_tree_bytes(s2)
    assert sorted(t1) == ["bwd.flo", "fwd.flo", "manifest.json", "valid.png"]
    assert t1 == t2
    compared += len(t1)

    encode_args = ("--size", "16x12", "--bcs", "1,1,9,2,3,8")
    e1, e2 = tmp_path / "e1", tmp_path / "e2"
    for out in (e1, e2):
        out.mkdir()
        assert run("encode", *encode_args, "--out", out / "f.cfld", "--png", out / "f.png") == 0
    b1, b2 = read_tree_bytes(e1), read_tree_bytes(e2)
    assert sorted(b1) == ["f.cfld", "f.png"] and b1 == b2
    compared += len(b1)

    flows = tmp_path / "flows"
    assert run("synth", "--out-dir", flows, "--size", "24x24", "--homography", "identity") == 0
    pcf_args = ("--fwd", flows / "fwd.flo", "--bwd", flows / "bwd.flo", "--k", "7")
    p1, p2 = tmp_path / "p1", tmp_path / "p2"
    for out in (p1, p2):
        assert run("pcf", *pcf_args, "--out-dir", out) == 0
    b1, b2 = read_tree_bytes(p1), read_tree_bytes(p2)
    assert "report.json" in b1 and b1 == b2
    compared += len(b1)

    eval_args = ("--pcf-dir", p1, "--gt-mask", p1 / "union.png")
    capsys.readouterr()
    assert run("eval", *eval_args) == 0
    first = capsys.readouterr().out
    assert run("eval", *eval_args) == 0
    assert capsys.readouterr().out == first
    assert first.startswith("count,iou")
    compared += 1

    mh_args = ("--flow", flows / "fwd.flo", "--iters", "200", "--seed", "4")
    m1, m2 = tmp_path / "m1", tmp_path / "m2"
    for out in (m1, m2):
        out.mkdir()
        assert run(
            "multihomog", *mh_args,
            "--labels-out", out / "labels.csv",
            "--models-out", out / "models.json",
            "--png", out / "labels.png",
        ) == 0
    b1, b2 = read_tree_bytes(m1), read_tree_bytes(m2)
    assert sorted(b1) == ["labels.csv", "labels.png", "models.json"] and b1 == b2
    compared += len(b1)

    corr = tmp_path / "corr.csv"
    corr.write_text(
        "xs,ys,xt,yt,ms,mt\n"
        "0,0,1,0,1.0,0.9\n"
        "5,2,6,2,0.8,0.8\n"
        "1,7,2,7,0.6,1.0\n"
        "4,4,5,4,1.0,1.0\n"
    )
    f1, f2 = tmp_path / "f1.csv", tmp_path / "f2.csv"
    for out in (f1, f2):
        assert run("flags", "--input", corr, "--out", out) == 0
    assert f1.read_bytes() == f2.read_bytes()
    compared += 1

    report(11, f"all 6 commands byte-identical across reruns ({compared} outputs compared)")


# ---------------------------------------------------------------------------
# 12. Density maps equal brute-force counting.


def brute_force_density(flow):
    gs = np.zeros((flow.height, flow.width), dtype=np.int64)
    landing = {}
    for i in range(flow.height):
        for j in range(flow.width):
            if not flow.valid[i, j]:
                continue
            sx = math.floor(j + flow.u[i, j] + 0.5)
            sy = math.floor(i + flow.v[i, j] + 0.5)
            if 0 <= sx < flow.width and 0 <= sy < flow.height:
                landing[(i, j)] = (sy, sx)
                gs[sy, sx] += 1
    gt = np.zeros_like(gs)
    for (i, j), (sy, sx) in landing.items():
        gt[i, j] = gs[sy, sx]
    return gs, gt


def test_flow_density_matches_brute_force_counting():
    for case in range(100):
        rng = np.random.default_rng(1200 + case)
        u = rng.uniform(-20.0, 20.0, size=(16, 16))
        v = rng.uniform(-20.0, 20.0, size=(16, 16))
        valid = rng.random((16, 16)) < 0.85
        valid[0, 0] = True
        flow = FlowField(16, 16, u, v, valid)
        gs, gt = flow_density(flow)
        want_gs, want_gt = brute_force_density(flow)
        npt.assert_array_equal(gs.counts, want_gs)
        npt.assert_array_equal(gt.counts, want_gt)
    report(12, "density maps equal brute-force counting on 100 random 16x16 flows")
