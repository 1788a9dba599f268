import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from augoverlap.sphere import (
    SphericalCap,
    augment,
    augment_batch,
    cap_area,
    cap_radius_from_area,
    geodesic_distance,
    make_dataset,
    pairwise_geodesic,
    paper_synthetic,
    sample_cap_uniform,
    sphere_area,
)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def test_geodesic_examples():
    e1, e2, e3 = np.eye(3)
    assert geodesic_distance(e1, e2) == pytest.approx(math.pi / 2)
    assert geodesic_distance(e3, -e3) == pytest.approx(math.pi)
    assert geodesic_distance(e1, e1) == 0.0


@given(st.lists(st.floats(-1, 1), min_size=9, max_size=9))
def test_geodesic_metric_axioms(vals):
    a, b, c = np.reshape(vals, (3, 3))
    if min(np.linalg.norm(a), np.linalg.norm(b), np.linalg.norm(c)) < 1e-3:
        return
    a, b, c = unit(a), unit(b), unit(c)
    assert geodesic_distance(a, b) == pytest.approx(geodesic_distance(b, a), abs=1e-12)
    assert 0.0 <= geodesic_distance(a, b) <= math.pi
    assert geodesic_distance(a, c) <= geodesic_distance(a, b) + geodesic_distance(b, c) + 1e-9


def test_cap_area_closed_forms():
    assert cap_area(math.pi) == pytest.approx(4 * math.pi)
    assert cap_area(math.pi / 2) == pytest.approx(2 * math.pi)
    r = cap_radius_from_area(1.0)
    assert math.cos(r) == pytest.approx(1 - 1 / (2 * math.pi))
    for d in (3, 4, 6):
        assert cap_area(math.pi, d) == pytest.approx(sphere_area(d))
        assert cap_area(math.pi / 2, d) == pytest.approx(sphere_area(d) / 2)
        assert cap_area(cap_radius_from_area(0.3, d), d) == pytest.approx(0.3)


def test_cap_area_general_d_matches_s2():
    for t in (0.1, 1.0, 2.5):
        # the beta-function branch agrees with the S^2 closed form
        from scipy import special

        general = 0.5 * sphere_area(2) * special.betainc(1.0, 0.5, math.sin(t) ** 2) if t <= math.pi / 2 else None
        if general is not None:
            assert general == pytest.approx(cap_area(t, 2))


def test_cap_validation():
    with pytest.raises(ValueError):
        SphericalCap(np.array([0.0, 0.0, 2.0]), 0.5)
    with pytest.raises(ValueError):
        SphericalCap(np.array([0.0, 0.0, 1.0]), 0.0)
    with pytest.raises(ValueError):
        cap_radius_from_area(20.0)


def test_cap_samples_inside_and_uniform():
    rng = np.random.default_rng(0)
    cap = SphericalCap.from_area(unit([1, 2, 3]), 1.0)
    pts = sample_cap_uniform(cap, rng, 20000)
    assert np.allclose(np.linalg.norm(pts, axis=1), 1.0)
    assert cap.contains(pts).all()
    # uniform on the cap: cos of the polar angle is uniform on [cos r, 1]
    c = pts @ cap.center
    lo = math.cos(cap.radius)
    assert np.mean(c) == pytest.approx((1 + lo) / 2, abs=3e-3)
    # area of a sub-cap of half the radius
    frac = np.mean(c >= math.cos(cap.radius / 2))
    assert frac == pytest.approx(cap_area(cap.radius / 2) / cap.area, abs=0.01)


def test_cap_samples_higher_dim_rejection():
    rng = np.random.default_rng(1)
    center = unit(np.ones(5))
    cap = SphericalCap(center, 1.0)
    pts = sample_cap_uniform(cap, rng, 500)
    assert pts.shape == (500, 5)
    assert cap.contains(pts).all()
    with pytest.raises(ValueError, match="acceptance"):
        sample_cap_uniform(SphericalCap(unit(np.ones(12)), 1e-3), rng, 1)


def test_augment_radius_and_zero():
    rng = np.random.default_rng(2)
    x = unit([0.3, -0.2, 0.9])
    assert np.array_equal(augment(x, 0.0, rng), x)
    views = augment_batch(np.repeat(x[None], 2000, axis=0), 0.2, rng)
    d = pairwise_geodesic(views, x[None])[:, 0]
    assert d.max() <= 0.2 + 1e-9
    with pytest.raises(ValueError):
        augment(x, -0.1, rng)
    with pytest.raises(ValueError):
        augment(x, 4.0, rng)


def test_augment_pole_and_antipode():
    rng = np.random.default_rng(3)
    for x in (np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, -1.0])):
        v = augment_batch(np.repeat(x[None], 500, axis=0), 0.3, rng)
        assert pairwise_geodesic(v, x[None]).max() <= 0.3 + 1e-9


def test_make_dataset_determinism_and_labels():
    a = make_dataset(2, 50, [[0, 0, 1], [0, 0, -1]], 1.0, seed=7)
    b = make_dataset(2, 50, [[0, 0, 1], [0, 0, -1]], 1.0, seed=7)
    assert np.array_equal(a.points, b.points)
    assert np.bincount(a.labels).tolist() == [50, 50]
    assert a.foreign_count == 0
    with pytest.raises(ValueError):
        make_dataset(2, 5, [[0, 0, 1], [0, 0, 1]], 1.0, seed=0)


def test_overlapping_caps_count_foreign_points():
    ds = make_dataset(2, 200, [[0, 0, 1], unit([0, 0.3, 1])], 1.0, seed=0)
    assert ds.foreign_count > 0


def test_paper_preset_shape(tmp_path):
    train, test = paper_synthetic(0)
    assert train.n == 5000 and test.n == 1000
    assert train.n_classes == 2
    train.to_csv(tmp_path / "d.csv")
    header = (tmp_path / "d.csv").read_text().splitlines()[0]
    assert header == "id,label,x0,x1,x2"


@settings(max_examples=25)
@given(st.floats(0.01, 3.0), st.integers(0, 10_000))
def test_augment_stays_in_disk(r, seed):
    rng = np.random.default_rng(seed)
    x = unit(rng.standard_normal(3))
    v = augment_batch(np.repeat(x[None], 64, axis=0), r, rng)
    assert np.allclose(np.linalg.norm(v, axis=1), 1.0)
    assert pairwise_geodesic(v, x[None]).max() <= r + 1e-9
