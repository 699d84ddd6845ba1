import numpy as np
import pytest

from lumen.geometry import (
    DeltaBound,
    Ellipsoid,
    Paraboloid,
    c_delta,
    eccentricity_from_focal,
    ellipsoid_normal,
    ellipsoid_radius,
    focal_from_eccentricity,
    paraboloid_normal,
    paraboloid_radius,
    radius_bounds,
    reflect_direction,
    verify_focus_property,
)

E1 = np.array([1.0, 0.0, 0.0])
E3 = np.array([0.0, 0.0, 1.0])


def random_units(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestEccentricity:
    def test_exact_values(self):
        assert eccentricity_from_focal(0.75, 1.0) == pytest.approx(0.5, abs=1e-15)
        # depends only on the ratio d / |OP|
        assert eccentricity_from_focal(1.5, 2.0) == pytest.approx(0.5, abs=1e-15)
        assert eccentricity_from_focal(10.0, 1.0) == pytest.approx(np.sqrt(101) - 10)

    def test_inverse_exact(self):
        assert focal_from_eccentricity(0.5, 1.0) == pytest.approx(0.75, rel=1e-15)
        assert focal_from_eccentricity(0.5, 2.0) == pytest.approx(1.5, rel=1e-15)
        # degenerate-segment limit
        assert focal_from_eccentricity(1.0 - 1e-12, 1.0) < 2e-12

    def test_round_trip(self):
        ratios = np.geomspace(1e-3, 1e3, 2000)
        eps = eccentricity_from_focal(ratios, 1.0)
        back = focal_from_eccentricity(eps, 1.0)
        assert np.max(np.abs(back - ratios) / ratios) <= 1e-12

    def test_monotone_in_d(self):
        d = np.linspace(0.1, 20.0, 500)
        eps = eccentricity_from_focal(d, 2.0)
        assert np.all(np.diff(eps) < 0.0)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            eccentricity_from_focal(-1.0, 1.0)
        with pytest.raises(ValueError):
            eccentricity_from_focal(1.0, 0.0)
        with pytest.raises(ValueError):
            focal_from_eccentricity(1.0, 1.0)
        with pytest.raises(ValueError):
            focal_from_eccentricity(0.0, 1.0)


class TestCDelta:
    def test_known_values(self):
        assert c_delta(15.0 / 8.0) == pytest.approx(0.25, abs=1e-15)
        assert c_delta(0.75) == pytest.approx(0.5, abs=1e-15)
        assert c_delta(1e-9) == pytest.approx(1.0, abs=1e-6)

    def test_strictly_decreasing(self):
        deltas = np.geomspace(1e-3, 1e3, 400)
        assert np.all(np.diff(c_delta(deltas)) < 0.0)

    def test_delta_bound(self):
        b = DeltaBound.from_delta(0.75)
        assert b.c == pytest.approx(0.5)
        assert b.min_cos_incidence == pytest.approx(1.0 / 3.0)
        assert b.harnack == pytest.approx(3.0)
        with pytest.raises(ValueError):
            c_delta(0.0)


class TestEllipsoid:
    def test_consistency_invariant(self):
        e = Ellipsoid.from_focal(E3, 0.75)
        assert e.eccentricity == pytest.approx(0.5)
        assert e.op == pytest.approx(2 * e.eccentricity * e.focal_param
                                     / (1 - e.eccentricity**2), rel=1e-12)
        with pytest.raises(ValueError):
            Ellipsoid(E3, 0.75, 0.4, E3, 1.0)  # inconsistent triple

    def test_radius_values(self):
        e = Ellipsoid.from_eccentricity(E3, 0.5)
        d = e.focal_param
        assert ellipsoid_radius(e, E1) == pytest.approx(d)  # equatorial radius is d
        assert ellipsoid_radius(e, E3) == pytest.approx(2 * d)
        assert ellipsoid_radius(e, -E3) == pytest.approx(2 * d / 3)

    def test_radius_monotone_in_d(self):
        rng = np.random.default_rng(7)
        x = random_units(rng, 64)
        ds = np.linspace(0.5, 5.0, 40)
        rho = np.stack([ellipsoid_radius(Ellipsoid.from_focal(E3, d), x) for d in ds])
        assert np.all(np.diff(rho, axis=0) > 0.0)

    def test_normal(self):
        e = Ellipsoid.from_eccentricity(E3, 0.5)
        assert np.allclose(ellipsoid_normal(e, E3), E3, atol=1e-14)
        assert np.allclose(ellipsoid_normal(e, -E3), -E3, atol=1e-14)
        nu = ellipsoid_normal(e, E1)
        assert np.allclose(nu, [2 / np.sqrt(5), 0.0, -1 / np.sqrt(5)], atol=1e-14)

    def test_normal_cos_bound(self):
        rng = np.random.default_rng(3)
        x = random_units(rng, 2000)
        delta = 1.2
        c = c_delta(delta)
        e = Ellipsoid.from_focal(E3, delta * 1.0)  # d = delta |OP|: eps = c
        cosines = np.sum(x * ellipsoid_normal(e, x), axis=1)
        assert np.all(cosines >= (1 - c) / (1 + c) - 1e-12)


class TestParaboloid:
    def test_radius(self):
        p = Paraboloid(E3, 1.0)
        assert paraboloid_radius(p, -E3) == pytest.approx(0.5)
        assert paraboloid_radius(p, E1) == pytest.approx(1.0)
        p2 = Paraboloid(E3, 2.0)
        x = np.array([np.sqrt(3) / 2, 0.0, 0.5])
        assert paraboloid_radius(p2, x) == pytest.approx(4.0)

    def test_degenerate_direction(self):
        p = Paraboloid(E3, 1.0)
        with pytest.raises(ValueError):
            paraboloid_radius(p, E3)
        with pytest.raises(ValueError):
            paraboloid_normal(p, E3)

    def test_normal(self):
        p = Paraboloid(E3, 1.0)
        assert np.allclose(paraboloid_normal(p, -E3), -E3, atol=1e-15)
        assert np.allclose(paraboloid_normal(p, E1), np.array([1, 0, -1]) / np.sqrt(2),
                           atol=1e-15)
        # x . nu = |x - m| / 2 for unit vectors
        rng = np.random.default_rng(5)
        x = random_units(rng, 500)
        x = x[x @ E3 < 0.9]
        nu = paraboloid_normal(p, x)
        assert np.allclose(np.sum(x * nu, axis=1),
                           np.linalg.norm(x - E3, axis=1) / 2, atol=1e-13)

    def test_reflects_to_axis(self):
        rng = np.random.default_rng(11)
        axis = np.array([0.3, -0.5, 0.81])
        axis /= np.linalg.norm(axis)
        p = Paraboloid(axis, 1.7)
        x = random_units(rng, 10000)
        x = x[x @ axis < 1 - 1e-6]
        y = reflect_direction(x, paraboloid_normal(p, x))
        assert np.max(np.linalg.norm(y - axis, axis=1)) <= 1e-12


class TestReflect:
    def test_examples(self):
        assert np.allclose(reflect_direction(E3, E3), -E3)
        # grazing: X . nu = 0 leaves X unchanged
        assert np.allclose(reflect_direction(E1, E3), E1)
        nu = (E1 + E3) / np.sqrt(2)
        assert np.allclose(reflect_direction(E3, nu), -E1, atol=1e-15)

    def test_unit_and_flip(self):
        rng = np.random.default_rng(1)
        x = random_units(rng, 5000)
        nu = random_units(rng, 5000)
        y = reflect_direction(x, nu)
        assert np.max(np.abs(np.linalg.norm(y, axis=1) - 1.0)) <= 1e-14
        assert np.allclose(np.sum(y * nu, axis=1), -np.sum(x * nu, axis=1), atol=1e-14)


class TestFocusProperty:
    def test_example(self):
        e = Ellipsoid.from_focal(E3, 0.75)
        assert verify_focus_property(e, E1) <= 1e-12
        assert verify_focus_property(e, E3) <= 1e-12  # on-axis ray

    def test_random_sweep(self):
        rng = np.random.default_rng(42)
        x = random_units(rng, 1000)
        e = Ellipsoid.from_focal(np.array([0.2, -0.4, 1.3]), 2.0)
        assert np.max(verify_focus_property(e, x)) <= 1e-9 * e.op


class TestRadiusBounds:
    def test_near(self):
        e = Ellipsoid.from_focal(E3, 1.0)  # d = |OP| = 1: delta up to 1
        lo, hi = radius_bounds(e, 0.75)
        assert lo == pytest.approx(2.0 / 3.0)
        assert hi == pytest.approx(2.0)
        with pytest.raises(ValueError):
            radius_bounds(e, 1.5)  # d < delta |OP|

    def test_far(self):
        p = Paraboloid(E3, 1.0)
        assert radius_bounds(p, 0.5) == pytest.approx((0.5, 2.0))
        with pytest.raises(ValueError):
            radius_bounds(p, 1.5)

    def test_containment_sweep(self):
        rng = np.random.default_rng(9)
        x = random_units(rng, 1000)
        for delta in (0.5, 1.0, 15 / 8):
            d = delta * 1.0 * 1.3  # d >= delta |OP|
            e = Ellipsoid.from_focal(E3, d)
            lo, hi = radius_bounds(e, delta)
            rho = ellipsoid_radius(e, x)
            assert np.all(rho >= lo - 1e-12) and np.all(rho <= hi + 1e-12)
        p = Paraboloid(E3, 1.0)
        delta = 0.4
        xs = x[x @ E3 <= 1 - delta]
        lo, hi = radius_bounds(p, delta)
        rho = paraboloid_radius(p, xs)
        assert np.all(rho >= lo - 1e-12) and np.all(rho <= hi + 1e-12)
