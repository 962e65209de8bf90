import numpy as np
import pytest

from oracles import brute_force_projection as brute_force
from oracles import random_disk_points
from strata.raster import (
    STRATA,
    aggregate,
    composite_rgb,
    disk_mask,
    export,
    occupancy,
    pixel_index,
    project,
    raster_backward,
    to_pgm,
)


def random_instance(rng, n_max=50, k_max=8, radius=10.0):
    n = int(rng.integers(1, n_max + 1))
    K = int(rng.integers(1, k_max + 1))
    xy = random_disk_points(rng, n, radius)
    probs = rng.dirichlet(np.ones(4), size=n)
    return probs, xy, K


def test_single_point():
    probs = np.array([[0.1, 0.7, 0.15, 0.05]])
    rs = project(probs, np.array([[0.2, 0.3]]), K=4, radius=10.0)
    for r, v in zip(rs, probs[0, 1:]):
        assert r.values[2, 2] == v
        assert np.count_nonzero(r.values) == 1


def test_two_points_one_pixel_max():
    probs = np.array([[0.0, 0.0, 0.3, 0.7], [0.0, 0.1, 0.9, 0.0]])
    rs = project(probs, np.array([[0.1, 0.1], [0.2, 0.2]]), K=2, radius=10.0)
    assert rs[1].values[1, 1] == 0.9
    assert rs[1].argmax[1, 1] == 1


def test_point_outside_square():
    with pytest.raises(ValueError):
        project(np.full((1, 4), 0.25), np.array([[10.5, 0.0]]), K=4)


def test_far_edge_closed():
    idx = pixel_index(np.array([[10.0, 10.0], [-10.0, -10.0]]), 4, 10.0)
    np.testing.assert_array_equal(idx, [15, 0])


def test_rows_follow_y():
    idx = pixel_index(np.array([[-9.0, 9.0]]), 4, 10.0)
    assert idx[0] == 3 * 4 + 0


@pytest.mark.parametrize("seed", range(200))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    probs, xy, K = random_instance(rng)
    rs = project(probs, xy, K, 10.0)
    expect, occ = brute_force(probs, xy, K, 10.0)
    for s, r in enumerate(rs):
        np.testing.assert_array_equal(r.values, expect[s])
    np.testing.assert_allclose(occupancy(rs), occ, rtol=0, atol=1e-12)


def test_aggregate_extremes():
    K = 8
    mask = disk_mask(K, 10.0)
    r = project(np.full((1, 4), 0.25), np.zeros((1, 2)), K)[0]
    r.values = np.where(mask, 0.5, 0.0)
    assert aggregate(r)[0] == pytest.approx(0.5)
    r.values = np.zeros((K, K))
    assert aggregate(r)[0] == 0.0
    r.values = mask.astype(float)
    assert aggregate(r)[0] == 1.0


def test_aggregate_single_pixel_k32():
    mask = disk_mask(32, 10.0)
    # count pixel centers inside the disk by hand
    c = -10 + 20 / 32 * (np.arange(32) + 0.5)
    count = sum(1 for y in c for x in c if x * x + y * y <= 100)
    assert mask.sum() == count
    probs = np.array([[0.0, 1.0, 0.0, 0.0]])
    r = project(probs, np.zeros((1, 2)), 32)[0]
    o, grad = aggregate(r)
    assert o == pytest.approx(1 / count)
    assert grad[mask].min() == grad[mask].max() == 1 / count
    assert np.all(grad[~mask] == 0)


def test_one_hot_composition_is_footprint(rng):
    K = 8
    xy = np.array([[x, y] for y in np.linspace(-9.9, 9.9, 40) for x in np.linspace(-9.9, 9.9, 40)])
    xy = xy[np.hypot(*xy.T) <= 10]
    cls = rng.integers(0, 4, len(xy))
    probs = np.eye(4)[cls]
    rs = project(probs, xy, K)
    pix = pixel_index(xy, K, 10.0)
    mask = disk_mask(K, 10.0).ravel()
    for s in range(3):
        covered = set(pix[cls == s + 1]) & set(np.flatnonzero(mask))
        assert occupancy(rs)[s] == pytest.approx(len(covered) / mask.sum(), abs=1e-12)


def test_order_invariance(rng):
    probs, xy, K = random_instance(rng, n_max=50)
    perm = rng.permutation(len(xy))
    a = occupancy(project(probs, xy, K))
    b = occupancy(project(probs[perm], xy[perm], K))
    np.testing.assert_array_equal(a, b)


def test_backward_routes_to_argmax():
    probs = np.array([[0.0, 0.2, 0.5, 0.1], [0.0, 0.6, 0.5, 0.0]])
    rs = project(probs, np.array([[0.1, 0.1], [0.2, 0.2]]), K=2)
    d = [np.where(r.mask, 1.0, 0.0) for r in rs]
    g = raster_backward(rs, d)
    # L: point 1 wins, M: tie goes to point 0, H: point 0 wins
    np.testing.assert_array_equal(g, [[0, 0, 1, 1], [0, 1, 0, 0]])


def test_backward_shape_mismatch():
    rs = project(np.full((1, 4), 0.25), np.zeros((1, 2)), K=4)
    with pytest.raises(ValueError):
        raster_backward(rs, [np.zeros((3, 3))] * 3)


@pytest.mark.parametrize("seed", range(10))
def test_occupancy_gradient_finite_difference(seed):
    rng = np.random.default_rng(seed)
    probs, xy, K = random_instance(rng, n_max=20, k_max=6)
    w = rng.normal(size=3)
    rs = project(probs, xy, K)
    d = [w[s] * aggregate(r)[1] for s, r in enumerate(rs)]
    g = raster_backward(rs, d)
    h = 1e-6
    num = np.zeros_like(probs)
    for i in range(len(probs)):
        for c in range(4):
            p = probs.copy()
            p[i, c] += h
            fp = w @ occupancy(project(p, xy, K))
            p[i, c] -= 2 * h
            fm = w @ occupancy(project(p, xy, K))
            num[i, c] = (fp - fm) / (2 * h)
    np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-8)
    assert np.all(g[:, 0] == 0)


def test_pgm_and_composite():
    probs = np.array([[0.0, 1.0, 0.0, 0.0]])
    rs = project(probs, np.zeros((1, 2)), K=4)
    text = to_pgm(rs[0])
    lines = text.splitlines()
    assert lines[0] == "P2" and lines[2] == "4 4" and lines[3] == "255"
    rgb = composite_rgb(rs)
    # point sits in pixel row 2 (from the bottom) -> image row 1
    np.testing.assert_array_equal(rgb[1, 2], [0, 255, 0])
    np.testing.assert_array_equal(rgb[0, 0], [255, 255, 255])


def test_export_writes_files(tmp_path):
    rs = project(np.full((3, 4), 0.25), np.array([[0, 0], [1, 1], [-2, 3]]), K=8)
    paths = export(rs, tmp_path, "p")
    assert sorted(p.name for p in paths) == sorted([f"p_{s}.pgm" for s in STRATA] + ["p.ppm", "p.csv"])
    csv = (tmp_path / "p.csv").read_text().splitlines()
    assert len(csv) == 1 + 3 * 64
