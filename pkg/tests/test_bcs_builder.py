"""Tests for flow-density histograms, origin selection, and BCS building."""

import numpy as np
import numpy.testing as npt
import pytest
from PIL import Image

from pcfield.bcs_builder import (
    BcsPair,
    BuilderConfig,
    DensityMap,
    Fallback,
    build_bcs_pair,
    build_with_reselection,
    density_to_png,
    flow_density,
    select_origin,
)
from pcfield.errors import EmptyFlow, InvalidFlowAtVertex, NoCandidate
from pcfield.flowfield import FlowField, HomographyMap, synth_flow_homography
from pcfield.geometry import Point2, signed_area


def density_oracle(flow: FlowField):
    """Brute-force per-pixel histogram: round each valid target pixel's
    source point half-up and count hits; then look the counts back up."""
    gs = np.zeros((flow.height, flow.width), dtype=np.int64)
    src_of = {}
    for y in range(flow.height):
        for x in range(flow.width):
            if not flow.valid[y, x]:
                continue
            sx = int(np.floor(x + flow.u[y, x] + 0.5))
            sy = int(np.floor(y + flow.v[y, x] + 0.5))
            src_of[(x, y)] = (sx, sy)
            if 0 <= sx < flow.width and 0 <= sy < flow.height:
                gs[sy, sx] += 1
    gt = np.zeros_like(gs)
    for (x, y), (sx, sy) in src_of.items():
        if 0 <= sx < flow.width and 0 <= sy < flow.height:
            gt[y, x] = gs[sy, sx]
    return gs, gt


def pooled_oracle(counts: np.ndarray, k: int) -> np.ndarray:
    """Zero-padded box sums by direct summation."""
    h, w = counts.shape
    r = k // 2
    padded = np.zeros((h + 2 * r, w + 2 * r), dtype=np.int64)
    padded[r : r + h, r : r + w] = counts
    out = np.zeros_like(counts)
    for y in range(h):
        for x in range(w):
            out[y, x] = padded[y : y + k, x : x + k].sum()
    return out


def test_flow_density_zero_flow_all_ones():
    flow = synth_flow_homography(HomographyMap.identity(), 6, 4)
    gs, gt = flow_density(flow)
    npt.assert_array_equal(gs.counts, np.ones((4, 6), dtype=np.int64))
    npt.assert_array_equal(gt.counts, np.ones((4, 6), dtype=np.int64))


def test_flow_density_collapse_to_corner():
    ys, xs = np.mgrid[0:3, 0:3].astype(np.float64)
    flow = FlowField(3, 3, -xs, -ys)
    gs, gt = flow_density(flow)
    expect = np.zeros((3, 3), dtype=np.int64)
    expect[0, 0] = 9
    npt.assert_array_equal(gs.counts, expect)
    npt.assert_array_equal(gt.counts, np.full((3, 3), 9, dtype=np.int64))


def test_flow_density_two_by_two_hand_case():
    # row 0 collapses to source (0,0); row 1 maps identically
    u = np.array([[0.0, -1.0], [0.0, 0.0]])
    v = np.zeros((2, 2))
    gs, gt = flow_density(FlowField(2, 2, u, v))
    npt.assert_array_equal(gs.counts, np.array([[2, 0], [1, 1]]))
    npt.assert_array_equal(gt.counts, np.array([[2, 2], [1, 1]]))


def test_flow_density_rounds_half_up():
    # both pixels land on source x = 1: 0 + 0.5 and 1 - 0.5 round up
    u = np.array([[0.5, -0.5]])
    v = np.zeros((1, 2))
    gs, _ = flow_density(FlowField(2, 1, u, v))
    npt.assert_array_equal(gs.counts, np.array([[0, 2]]))


def test_flow_density_out_of_bounds_dropped():
    flow = synth_flow_homography(HomographyMap.translation(100.0, 0.0), 4, 4)
    gs, gt = flow_density(flow)
    assert gs.counts.sum() == 0
    assert gt.counts.sum() == 0


def test_flow_density_invalid_pixels_ignored():
    valid = np.ones((3, 3), dtype=bool)
    valid[1, 1] = False
    flow = FlowField(3, 3, np.zeros((3, 3)), np.zeros((3, 3)), valid)
    gs, gt = flow_density(flow)
    assert gs.counts[1, 1] == 0
    assert gt.counts[1, 1] == 0
    assert gs.counts.sum() == 8


def test_flow_density_empty_flow():
    valid = np.zeros((3, 3), dtype=bool)
    flow = FlowField(3, 3, np.zeros((3, 3)), np.zeros((3, 3)), valid)
    with pytest.raises(EmptyFlow):
        flow_density(flow)


def test_flow_density_matches_bruteforce_oracle():
    rng = np.random.default_rng(90)
    for _ in range(25):
        u = rng.uniform(-6.0, 6.0, size=(16, 16))
        v = rng.uniform(-6.0, 6.0, size=(16, 16))
        valid = rng.uniform(size=(16, 16)) > 0.2
        flow = FlowField(16, 16, u, v, valid)
        gs, gt = flow_density(flow)
        gs_ref, gt_ref = density_oracle(flow)
        npt.assert_array_equal(gs.counts, gs_ref)
        npt.assert_array_equal(gt.counts, gt_ref)
        assert gs.counts.sum() <= int(valid.sum())


def test_select_origin_single_peak():
    counts = np.zeros((10, 10), dtype=np.int64)
    counts[5, 5] = 1
    origin = select_origin(DensityMap(10, 10, counts), 3)
    assert (origin.x, origin.y) == (5.0, 5.0)


def test_select_origin_uniform_prefers_first_interior():
    counts = np.ones((5, 5), dtype=np.int64)
    origin = select_origin(DensityMap(5, 5, counts), 3)
    assert (origin.x, origin.y) == (1.0, 1.0)


def test_select_origin_pooled_value_is_optimal():
    rng = np.random.default_rng(17)
    for _ in range(50):
        counts = rng.integers(0, 10, size=(12, 15))
        pooled = pooled_oracle(counts, 5)
        origin = select_origin(DensityMap(15, 12, counts.astype(np.int64)), 5)
        assert pooled[int(origin.y), int(origin.x)] == pooled.max()


def test_select_origin_respects_exclusion():
    counts = np.zeros((9, 9), dtype=np.int64)
    counts[2, 2] = 10
    counts[6, 6] = 4
    excl = np.zeros((9, 9), dtype=bool)
    excl[:4, :4] = True
    origin = select_origin(DensityMap(9, 9, counts), 3, exclusion=excl)
    assert (origin.x, origin.y) == (6.0, 6.0)


def test_select_origin_exclusion_soundness():
    rng = np.random.default_rng(28)
    for _ in range(30):
        counts = rng.integers(0, 5, size=(10, 10)).astype(np.int64)
        excl = rng.uniform(size=(10, 10)) > 0.5
        try:
            origin = select_origin(DensityMap(10, 10, counts), 3, exclusion=excl)
        except NoCandidate:
            continue
        assert not excl[int(origin.y), int(origin.x)]


def test_select_origin_no_candidate():
    counts = np.zeros((6, 6), dtype=np.int64)
    with pytest.raises(NoCandidate):
        select_origin(DensityMap(6, 6, counts), 3)
    counts[3, 3] = 5
    with pytest.raises(NoCandidate):
        select_origin(DensityMap(6, 6, counts), 3, exclusion=np.ones((6, 6), dtype=bool))


def test_build_bcs_pair_identity_flow():
    flow = synth_flow_homography(HomographyMap.identity(), 24, 24)
    pair = build_bcs_pair(flow, BuilderConfig(k=9, rng_seed=1))
    npt.assert_allclose(pair.source.vertices(), pair.target.vertices(), atol=1e-12)


def test_build_bcs_pair_translation_flow():
    flow = synth_flow_homography(HomographyMap.translation(5.0, 0.0), 24, 24)
    pair = build_bcs_pair(flow, BuilderConfig(k=9, rng_seed=1))
    npt.assert_allclose(
        pair.source.vertices(), pair.target.vertices() + np.array([-5.0, 0.0]), atol=1e-9
    )


def test_build_bcs_pair_deterministic():
    flow = synth_flow_homography(HomographyMap.identity(), 20, 20)
    a = build_bcs_pair(flow, BuilderConfig(k=9, rng_seed=5))
    b = build_bcs_pair(flow, BuilderConfig(k=9, rng_seed=5))
    assert a == b
    c = build_bcs_pair(flow, BuilderConfig(k=9, rng_seed=6))
    assert a != c


def test_build_bcs_pair_vertices_stay_near_origin():
    flow = synth_flow_homography(HomographyMap.identity(), 30, 30)
    for seed in range(8):
        pair = build_bcs_pair(flow, BuilderConfig(k=9, rng_seed=seed))
        origin = pair.target.origin
        verts = pair.target.vertices()
        dists = np.hypot(verts[1:, 0] - origin.x, verts[1:, 1] - origin.y)
        assert np.all(dists <= 4.0 + 1e-9)
        # pairwise separation and a usable triangle
        for i in range(3):
            for j in range(i + 1, 3):
                assert np.hypot(*(verts[i] - verts[j])) >= 1.0 - 1e-9
        assert abs(signed_area(pair.target.a, pair.target.b, pair.target.c)) > 1e-8


def test_build_bcs_pair_vertex_correspondence_under_flow():
    lin = np.array([[1.05, 0.08], [-0.04, 0.97]])
    top = np.hstack([lin, np.array([[2.0], [-1.0]])])
    h = HomographyMap(np.vstack([top, [0.0, 0.0, 1.0]]))
    flow = synth_flow_homography(h, 40, 40)
    pair = build_bcs_pair(flow, BuilderConfig(k=9, rng_seed=3))
    # source vertex = target vertex + flow, and the flow of an affine map
    # is itself affine, so bilinear sampling is exact
    tgt = pair.target.vertices()
    sx, sy, _ = h.inverse().apply_xy(tgt[:, 0], tgt[:, 1])
    npt.assert_allclose(pair.source.vertices(), np.stack([sx, sy], axis=1), atol=1e-9)


def ring_flow_with_invalid_center(size=15, center=7, radius=1):
    """Eight pixels around an invalid center map to themselves; the rest
    map out of bounds. The pooled density then peaks exactly on the
    invalid pixel."""
    u = np.full((size, size), 100.0)
    v = np.zeros((size, size))
    valid = np.ones((size, size), dtype=bool)
    for dy in (-radius, 0, radius):
        for dx in (-radius, 0, radius):
            if dx == 0 and dy == 0:
                continue
            u[center + dy, center + dx] = 0.0
    valid[center, center] = False
    return FlowField(size, size, u, v, valid)


def test_build_bcs_pair_invalid_flow_at_origin():
    flow = ring_flow_with_invalid_center()
    with pytest.raises(InvalidFlowAtVertex) as exc_info:
        build_bcs_pair(flow, BuilderConfig(k=3, rng_seed=0))
    origin = exc_info.value.origin
    assert (origin.x, origin.y) == (7.0, 7.0)


def test_reselection_accepts_first_good_probe():
    flow = synth_flow_homography(HomographyMap.identity(), 24, 24)
    calls = []

    def probe(pair):
        calls.append(pair)
        return 1.0

    out = build_with_reselection(flow, BuilderConfig(k=9, rng_seed=2), probe)
    assert isinstance(out, BcsPair)
    assert len(calls) == 1
    assert out == calls[0]


def test_reselection_exhausts_to_fallback():
    flow = synth_flow_homography(HomographyMap.identity(), 24, 24)
    calls = []

    def probe(pair):
        calls.append(pair)
        return 0.0

    cfg = BuilderConfig(k=9, max_reselect=5, rng_seed=2)
    out = build_with_reselection(flow, cfg, probe)
    assert isinstance(out, Fallback)
    assert out.attempts == 6
    assert len(calls) == 6


def test_reselection_masks_rejected_origin():
    flow = synth_flow_homography(HomographyMap.identity(), 24, 24)
    first_origin = build_bcs_pair(flow, BuilderConfig(k=9, rng_seed=2)).target.origin
    origins = []

    def probe(pair):
        origins.append(pair.target.origin)
        return 0.0 if len(origins) == 1 else 1.0

    out = build_with_reselection(flow, BuilderConfig(k=9, rng_seed=2), probe)
    assert isinstance(out, BcsPair)
    assert len(origins) == 2
    assert origins[0] == first_origin
    moved = np.hypot(
        origins[1].x - first_origin.x, origins[1].y - first_origin.y
    )
    assert moved > 4.0  # outside the masked disk of radius (k-1)/2


def test_reselection_counts_build_errors_as_rounds():
    flow = ring_flow_with_invalid_center()
    calls = []

    def probe(pair):
        calls.append(pair)
        return 1.0

    out = build_with_reselection(flow, BuilderConfig(k=3, max_reselect=0, rng_seed=0), probe)
    assert isinstance(out, Fallback)
    assert out.attempts == 1
    assert calls == []


def test_reselection_retries_past_invalid_origin():
    # With a k=5 window the pooled peak still sits on the invalid center;
    # after its disk is masked the surviving candidates are the four ring
    # corners, all valid, so the second round must succeed.
    flow = ring_flow_with_invalid_center(radius=2)
    out = build_with_reselection(flow, BuilderConfig(k=5, max_reselect=5, rng_seed=0), lambda p: 1.0)
    assert isinstance(out, BcsPair)
    origin = out.target.origin
    assert (origin.x, origin.y) in {(5.0, 5.0), (5.0, 9.0), (9.0, 5.0), (9.0, 9.0)}
    assert flow.valid[int(origin.y), int(origin.x)]


def test_reselection_no_candidate_is_immediate_fallback():
    flow = synth_flow_homography(HomographyMap.translation(100.0, 0.0), 8, 8)
    calls = []

    def probe(pair):
        calls.append(pair)
        return 1.0

    out = build_with_reselection(flow, BuilderConfig(k=3, max_reselect=5, rng_seed=0), probe)
    assert isinstance(out, Fallback)
    assert out.attempts == 1
    assert calls == []


def test_density_png_roundtrip(tmp_path):
    counts = np.array([[0, 5], [70000, 123]], dtype=np.int64)
    path = tmp_path / "density.png"
    density_to_png(path, DensityMap(2, 2, counts))
    img = np.asarray(Image.open(path))
    assert img.dtype == np.uint16 or img.dtype == np.int32
    npt.assert_array_equal(np.asarray(img, dtype=np.int64), [[0, 5], [65535, 123]])
