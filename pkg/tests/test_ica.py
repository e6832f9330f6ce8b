import math

import numpy as np
import pytest

from octagraph import ica
from octagraph.errors import DegenerateInputError
from shapes import image_for


def test_empty_foreground_is_one_area():
    seg = np.zeros((16, 16), bool)
    nodes = ica.extract_ica_nodes(seg, image_for(seg))
    assert len(nodes) == 1 and nodes[0].touches_border
    assert nodes[0].pixel_count == 256
    assert ica.skeleton_adjacency_edges(seg) == []


def test_hollow_square_ring():
    seg = np.zeros((30, 30), bool)
    seg[5:25, 5:25] = True
    seg[8:22, 8:22] = False
    nodes = ica.extract_ica_nodes(seg, image_for(seg))
    assert len(nodes) == 2
    assert [n.touches_border for n in nodes] == [True, False]
    assert nodes[1].pixel_count == 14 * 14
    assert nodes[1].props.area == pytest.approx(196 * (3 / 304) ** 2)
    assert ica.skeleton_adjacency_edges(seg) == [(0, 1)]


def test_two_rooms_one_wall():
    seg = np.zeros((20, 21), bool)
    seg[:, 10] = True
    assert ica.skeleton_adjacency_edges(seg) == [(0, 1)]


def test_double_wall_with_corridor():
    seg = np.zeros((20, 30), bool)
    seg[:, 10] = True
    seg[:, 20] = True
    assert ica.skeleton_adjacency_edges(seg) == [(0, 1), (1, 2)]


def test_thick_wall_still_adjacent():
    seg = np.zeros((20, 31), bool)
    seg[:, 12:19] = True
    assert ica.skeleton_adjacency_edges(seg) == [(0, 1)]


def test_faz_centre_pixel_rule():
    seg = np.zeros((31, 31), bool)
    seg[5:26, 5:26] = True
    seg[8:23, 8:23] = False
    labels = ica.background_labels(seg)
    nodes = ica.extract_ica_nodes(seg, image_for(seg), labels)
    assert ica.identify_faz(nodes, labels) == 1


def test_faz_nearest_centroid_when_centre_is_vessel():
    seg = np.zeros((31, 31), bool)
    seg[:, 15] = True
    seg[:, 14] = True  # left area centroid is closer to the centre
    labels = ica.background_labels(seg)
    nodes = ica.extract_ica_nodes(seg, image_for(seg), labels)
    assert ica.identify_faz(nodes, labels) == 1


def test_faz_tie_prefers_larger_area():
    # centroids (5, 5) and (15, 5) are both 5 px from the vessel centre pixel
    seg = np.ones((11, 21), bool)
    seg[3:8, 3:8] = False
    seg[3:8, 12:19] = False
    labels = ica.background_labels(seg)
    nodes = ica.extract_ica_nodes(seg, image_for(seg), labels)
    assert ica.identify_faz(nodes, labels, center=(10, 5)) == 1


def test_faz_requires_nodes():
    seg = np.ones((4, 4), bool)
    labels = ica.background_labels(seg)
    with pytest.raises(DegenerateInputError):
        ica.identify_faz([], labels)


def test_acircularity_of_disc():
    yy, xx = np.mgrid[:101, :101]
    disc = np.hypot(yy - 50, xx - 50) <= 30
    assert ica.acircularity(disc) == pytest.approx(1.0, abs=0.1)
    square = np.zeros((101, 101), bool)
    square[20:80, 20:80] = True
    assert ica.acircularity(square) > ica.acircularity(disc)
    assert ica.acircularity(square) == pytest.approx(4 / (2 * math.sqrt(math.pi)), rel=0.02)


def test_background_partition():
    rng = np.random.default_rng(4)
    for _ in range(20):
        seg = rng.random((40, 40)) < 0.45
        labels = ica.background_labels(seg)
        nodes = ica.extract_ica_nodes(seg, image_for(seg), labels)
        assert sum(n.pixel_count for n in nodes) == np.count_nonzero(~seg)
        for u, v in ica.skeleton_adjacency_edges(seg):
            assert 0 <= u < v < len(nodes)
