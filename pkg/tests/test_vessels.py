import math

import numpy as np
import pytest

from octagraph import raster, vessels
from octagraph.raster import IntensityGrid
from oracles import random_blob
from shapes import binary_tree, draw_line, image_for, letter_h, plus

PX = 3 / 304


def graph_of(seg):
    return vessels.build_vessel_graph(seg, image_for(seg))


def test_straight_line_is_one_segment():
    seg = np.zeros((9, 30), bool)
    seg[4, 3:27] = True
    g = graph_of(seg)
    assert len(g.segments) == 1 and g.edges == []
    assert g.segments[0].features.is_terminal


def test_plus_junction():
    g = graph_of(plus())
    assert len(g.segments) == 4
    assert g.edges == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    assert g.classification.num_clusters == 1


def test_y_junction():
    seg = np.zeros((30, 30), bool)
    draw_line(seg, 15, 15, 2, 15)
    draw_line(seg, 15, 15, 27, 3)
    draw_line(seg, 15, 15, 27, 27)
    g = graph_of(seg)
    assert len(g.segments) == 3
    assert g.edges == [(0, 1), (0, 2), (1, 2)]


def test_closed_ring():
    yy, xx = np.mgrid[:41, :41]
    seg = np.abs(np.hypot(yy - 20, xx - 20) - 12) < 1.0
    g = graph_of(seg)
    assert len(g.segments) == 1 and g.segments[0].closed
    assert g.segments[0].features.tortuosity == vessels.TORTUOSITY_CAP
    assert not g.segments[0].features.is_terminal


@pytest.mark.parametrize("thick", [1, 3])
def test_letter_h(thick):
    g = graph_of(letter_h(thick))
    assert len(g.segments) == 5
    assert len(g.edges) == 6


@pytest.mark.parametrize("depth", [1, 2, 3])
def test_tree_segment_count(depth):
    bifurcations = 2 ** depth - 1
    g = graph_of(binary_tree(depth))
    assert len(g.segments) == 2 * bifurcations + 1


def test_empty_segmentation():
    g = graph_of(np.zeros((10, 10), bool))
    assert g.segments == [] and g.edges == []


def test_isolated_pixel_segment():
    seg = np.zeros((5, 5), bool)
    seg[2, 2] = True
    g = graph_of(seg)
    assert len(g.segments) == 1
    assert g.segments[0].features.length == pytest.approx(PX)


# ---------------------------------------------------------------- features


def test_straight_path_features():
    seg = np.zeros((9, 30), bool)
    seg[3:6, 5:16] = True
    img = image_for(seg)
    dist = raster.distance_transform(seg)
    path = [(4, c) for c in range(5, 16)]
    f = vessels.segment_features(path, dist, img)
    assert f.length == pytest.approx(10 * PX)
    assert f.tortuosity == 1.0
    # end pixels sit on the bar's short edges
    assert f.avg_radius == pytest.approx((9 * 2 + 2 * 1) / 11 * PX)
    assert f.midpoint == (10.0, 4.0)
    assert f.endpoint_a == (5.0, 4.0) and f.endpoint_b == (15.0, 4.0)
    assert f.mean_intensity == pytest.approx(0.8)


def test_quarter_arc_tortuosity():
    # 8-connected chain of a quarter circle: 4 - 2*sqrt(2) is its chain-code limit
    r = 60
    seg = np.zeros((r + 3, r + 3), bool)
    t = np.linspace(0, math.pi / 2, 2000)
    seg[np.round(r * np.sin(t)).astype(int) + 1, np.round(r * np.cos(t)).astype(int) + 1] = True
    skel = raster.skeletonize(seg)
    g = vessels.build_vessel_graph(skel, image_for(skel))
    assert len(g.segments) == 1
    tort = g.segments[0].features.tortuosity
    assert tort == pytest.approx(4 - 2 * math.sqrt(2), abs=0.02)
    assert tort > math.pi / (2 * math.sqrt(2))


def test_empty_path_rejected():
    img = IntensityGrid(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        vessels.segment_features([], np.zeros((3, 3)), img)


def test_features_scale_with_pixel_size():
    seg = plus()
    a = vessels.build_vessel_graph(seg, IntensityGrid(np.where(seg, 0.7, 0.0), 0.01))
    b = vessels.build_vessel_graph(seg, IntensityGrid(np.where(seg, 0.7, 0.0), 0.02))
    for sa, sb in zip(a.segments, b.segments):
        assert sb.features.length == pytest.approx(2 * sa.features.length)
        assert sb.features.area == pytest.approx(4 * sa.features.area)
        assert sb.features.tortuosity == sa.features.tortuosity


# ---------------------------------------------------------------- invariants


def _loop_neighbour_count(skel):
    h, w = skel.shape
    out = np.zeros(skel.shape, int)
    for r in range(h):
        for c in range(w):
            for dr, dc in raster.RING:
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and skel[rr, cc]:
                    out[r, c] += 1
    return out


def test_classification_matches_loop_oracle():
    rng = np.random.default_rng(7)
    for _ in range(10):
        skel = raster.skeletonize(random_blob(rng, 48))
        cls = vessels.classify_skeleton(skel)
        count = _loop_neighbour_count(skel)
        want = np.where(~skel, vessels.NONE,
                        np.where(count <= 1, vessels.ENDPOINT, np.where(count == 2, vessels.SLAB, vessels.BRANCH)))
        np.testing.assert_array_equal(cls.kind, want)


def test_graph_invariants_random_blobs():
    rng = np.random.default_rng(21)
    for _ in range(25):
        seg = random_blob(rng, 64)
        g = graph_of(seg)
        kind = g.classification.kind
        # every slab pixel lies on exactly one path (closed paths repeat their start)
        seen = np.zeros(seg.shape, int)
        for s in g.segments:
            body = s.path[:-1] if s.closed else s.path
            for r, c in body:
                if kind[r, c] != vessels.BRANCH:
                    seen[r, c] += 1
        assert np.all(seen[(kind == vessels.SLAB) | (kind == vessels.ENDPOINT)] == 1)
        assert np.all(seen[kind == vessels.NONE] == 0)
        n = len(g.segments)
        assert all(0 <= i < j < n for i, j in g.edges)
        assert len(set(g.edges)) == len(g.edges)
        # pixel ownership partitions the foreground
        assert np.array_equal(g.owner > 0, seg)
        for s in g.segments:
            f = s.features
            assert f.length > 0 and 1 <= f.tortuosity <= vessels.TORTUOSITY_CAP
            assert f.avg_radius > 0 and f.area > 0


def test_assign_pixels_nearest_centreline():
    seg = np.zeros((12, 12), bool)
    seg[2:10, 2:10] = True
    paths = [[(3, 3)], [(8, 8)]]
    owner = vessels.assign_pixels(seg, paths)
    assert owner[2, 2] == 1 and owner[9, 9] == 2
    # the anti-diagonal is equidistant and goes to the lower id
    assert owner[5, 6] == 1 and owner[6, 5] == 1
