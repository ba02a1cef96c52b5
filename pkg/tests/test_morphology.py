import numpy as np
import pytest

import oracles
from rl4seg import anatomy
from rl4seg.evaluation import NoBoundary, dice, hausdorff_mm

N_MASKS = 500


@pytest.fixture(scope="module")
def masks():
    rng = np.random.default_rng(11)
    return [oracles.random_mask(rng) for _ in range(N_MASKS)]


@pytest.mark.parametrize("connectivity", [4, 8])
def test_connected_components_match_flood_fill(masks, connectivity):
    for m in masks:
        labels, n = anatomy.connected_components(m, connectivity)
        ref, n_ref = oracles.flood_label(m, connectivity)
        assert n == n_ref
        np.testing.assert_array_equal(labels, ref)


def test_hole_counts_match_flood_fill(masks):
    for m in masks:
        assert anatomy.count_holes(m) == oracles.hole_count(m)


def test_hausdorff_matches_quadratic_scan(masks):
    rng = np.random.default_rng(12)
    checked = 0
    for a in masks:
        b = oracles.random_mask(rng)
        h, w = min(a.shape[0], b.shape[0]), min(a.shape[1], b.shape[1])
        a, b = a[:h, :w], b[:h, :w]
        if not a.any() or not b.any():
            with pytest.raises(NoBoundary):
                hausdorff_mm(a, b)
            continue
        spacing = float(rng.uniform(0.5, 2.0))
        assert hausdorff_mm(a, b, spacing) == pytest.approx(oracles.hausdorff(a, b, spacing), abs=1e-12)
        checked += 1
    assert checked >= N_MASKS * 0.9


def test_boundary_matches_neighbour_scan(masks):
    for m in masks[:100]:
        expected = np.zeros_like(m)
        for i, j in oracles.edge_pixels(m):
            expected[i, j] = True
        np.testing.assert_array_equal(anatomy.boundary(m), expected)


def test_hausdorff_is_symmetric_and_zero_on_identity():
    a = np.zeros((10, 10), bool)
    a[2:6, 3:8] = True
    b = np.zeros((10, 10), bool)
    b[4:9, 1:4] = True
    assert hausdorff_mm(a, a) == 0.0
    assert hausdorff_mm(a, b) == hausdorff_mm(b, a)


def test_hausdorff_scales_with_spacing():
    a = np.zeros((8, 8), bool)
    a[1, 1] = True
    b = np.zeros((8, 8), bool)
    b[4, 5] = True
    assert hausdorff_mm(a, b, spacing=2.0) == pytest.approx(10.0)


def test_dice_edge_cases():
    empty = np.zeros((4, 4), bool)
    full = np.ones((4, 4), bool)
    assert dice(empty, empty) == 1.0
    assert dice(full, empty) == 0.0
    assert dice(full, full) == 1.0
    half = full.copy()
    half[:2] = False
    assert dice(half, full) == pytest.approx(2 * 8 / 24)


def test_single_pixel_line_has_unit_thickness():
    m = np.zeros((9, 15), bool)
    m[4, 2:13] = True
    t = anatomy.thickness_samples(m)
    assert t.min() == t.max() == 1.0


def test_uniform_band_thickness():
    m = np.zeros((15, 30), bool)
    m[5:8, 2:28] = True
    t = anatomy.thickness_samples(m)
    assert t.min() == t.max() == 3.0


def test_fill_holes_and_largest_component():
    m = np.zeros((9, 9), bool)
    m[1:6, 1:6] = True
    m[3, 3] = False
    m[7, 7] = True
    assert anatomy.count_holes(m) == 1
    filled = anatomy.fill_holes(m)
    assert filled[3, 3] and anatomy.count_holes(filled) == 0
    big = anatomy.largest_component(m)
    assert not big[7, 7] and big[1, 1]
