"""Closed-form geometry of focal quadrics.

Ellipsoids and paraboloids of revolution with one focus at the origin,
in polar form: exact radii, outer normals, mirror reflection, and the
delta-parameterized eccentricity/radius bounds used by the admissible
reflector classes.

All functions are pure and accept single vectors or arrays of shape
(..., 3); scalars broadcast in the usual numpy way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DeltaBound",
    "Ellipsoid",
    "Paraboloid",
    "c_delta",
    "eccentricity_from_focal",
    "ellipsoid_normal",
    "ellipsoid_radius",
    "focal_from_eccentricity",
    "paraboloid_normal",
    "paraboloid_radius",
    "radius_bounds",
    "reflect_direction",
    "verify_focus_property",
]

_UNIT_TOL = 1e-9


def _check_unit(x, name):
    n = np.linalg.norm(np.asarray(x, dtype=float), axis=-1)
    if not np.all(np.abs(n - 1.0) <= _UNIT_TOL):
        raise ValueError(f"{name} must be a unit vector (|{name}| = 1)")


def eccentricity_from_focal(d, op):
    """Eccentricity of the ellipsoid with foci O, P given its equatorial
    radius d and focal distance op = |OP|: sqrt(1 + (d/op)^2) - d/op."""
    d = np.asarray(d, dtype=float)
    op = np.asarray(op, dtype=float)
    if np.any(d <= 0.0) or np.any(op <= 0.0):
        raise ValueError("focal parameter and |OP| must be positive")
    r = d / op
    # conjugate form of sqrt(1 + r^2) - r: no cancellation at large r
    return 1.0 / (np.sqrt(1.0 + r * r) + r)


def focal_from_eccentricity(eps, op):
    """Inverse of eccentricity_from_focal: d = op (1 - eps^2) / (2 eps)."""
    eps = np.asarray(eps, dtype=float)
    op = np.asarray(op, dtype=float)
    if np.any(eps <= 0.0) or np.any(eps >= 1.0):
        raise ValueError("eccentricity must lie in (0, 1)")
    if np.any(op <= 0.0):
        raise ValueError("|OP| must be positive")
    return op * (1.0 - eps * eps) / (2.0 * eps)


def c_delta(delta):
    """Eccentricity ceiling for ellipsoids with d >= delta |OP|:
    c = -delta + sqrt(1 + delta^2), strictly decreasing, in (0, 1)."""
    delta = np.asarray(delta, dtype=float)
    if np.any(delta <= 0.0):
        raise ValueError("delta must be positive")
    return 1.0 / (np.sqrt(1.0 + delta * delta) + delta)


@dataclass(frozen=True)
class DeltaBound:
    """A separation parameter delta together with its eccentricity ceiling."""

    delta: float
    c: float

    @classmethod
    def from_delta(cls, delta):
        return cls(float(delta), float(c_delta(delta)))

    @property
    def min_cos_incidence(self):
        """Lower bound on x . nu over admissible ellipsoids: (1-c)/(1+c)."""
        return (1.0 - self.c) / (1.0 + self.c)

    @property
    def harnack(self):
        """Upper bound on max rho / min rho: (1+c)/(1-c)."""
        return (1.0 + self.c) / (1.0 - self.c)


@dataclass(frozen=True)
class Ellipsoid:
    """Ellipsoid of revolution with foci at the origin and at far_focus.

    The eccentricity is stored at construction so the d <-> eps consistency
    relation |OP| = 2 eps d / (1 - eps^2) stays a checkable invariant.
    """

    far_focus: np.ndarray
    focal_param: float
    eccentricity: float
    axis: np.ndarray
    op: float

    def __post_init__(self):
        if not (0.0 < self.eccentricity < 1.0):
            raise ValueError("eccentricity must lie in (0, 1)")
        if self.focal_param <= 0.0 or self.op <= 0.0:
            raise ValueError("focal parameter and |OP| must be positive")
        lhs = 2.0 * self.eccentricity * self.focal_param / (1.0 - self.eccentricity**2)
        if abs(lhs - self.op) > 1e-12 * self.op:
            raise ValueError("inconsistent (d, eps, |OP|) triple")

    @classmethod
    def from_focal(cls, far_focus, focal_param):
        p = np.asarray(far_focus, dtype=float)
        op = float(np.linalg.norm(p))
        if op <= 0.0:
            raise ValueError("far focus must differ from the origin")
        d = float(focal_param)
        eps = float(eccentricity_from_focal(d, op))
        return cls(p, d, eps, p / op, op)

    @classmethod
    def from_eccentricity(cls, far_focus, eccentricity):
        p = np.asarray(far_focus, dtype=float)
        op = float(np.linalg.norm(p))
        if op <= 0.0:
            raise ValueError("far focus must differ from the origin")
        eps = float(eccentricity)
        d = float(focal_from_eccentricity(eps, op))
        return cls(p, d, eps, p / op, op)


@dataclass(frozen=True)
class Paraboloid:
    """Paraboloid of revolution with focus at the origin and axis m."""

    axis: np.ndarray
    focal_param: float

    def __post_init__(self):
        if self.focal_param <= 0.0:
            raise ValueError("focal parameter must be positive")
        _check_unit(self.axis, "axis")

    @classmethod
    def from_axis(cls, axis, focal_param):
        a = np.asarray(axis, dtype=float)
        return cls(a / np.linalg.norm(a), float(focal_param))


def ellipsoid_radius(ell: Ellipsoid, x):
    """Polar radius d / (1 - eps x.m) of the ellipsoid in direction x."""
    x = np.asarray(x, dtype=float)
    _check_unit(x, "x")
    s = x @ ell.axis
    return ell.focal_param / (1.0 - ell.eccentricity * s)


def ellipsoid_normal(ell: Ellipsoid, x):
    """Outer unit normal (x - eps m) / |x - eps m| at the point rho(x) x."""
    x = np.asarray(x, dtype=float)
    _check_unit(x, "x")
    v = x - ell.eccentricity * ell.axis
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def paraboloid_radius(par: Paraboloid, x):
    """Polar radius d / (1 - x.m); rejects directions parallel to the axis."""
    x = np.asarray(x, dtype=float)
    _check_unit(x, "x")
    s = x @ par.axis
    if np.any(s >= 1.0 - 1e-12):
        raise ValueError("degenerate direction: x aligned with the axis")
    return par.focal_param / (1.0 - s)


def paraboloid_normal(par: Paraboloid, x):
    """Outer unit normal (x - m) / |x - m|; undefined at x = m."""
    x = np.asarray(x, dtype=float)
    _check_unit(x, "x")
    v = x - par.axis
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n <= 1e-12):
        raise ValueError("degenerate direction: x equals the axis")
    return v / n


def reflect_direction(incident, normal):
    """Mirror reflection Y = X - 2 (X.nu) nu of a unit direction."""
    x = np.asarray(incident, dtype=float)
    nu = np.asarray(normal, dtype=float)
    dot = np.sum(x * nu, axis=-1, keepdims=True)
    return x - 2.0 * dot * nu


def verify_focus_property(ell: Ellipsoid, x):
    """Distance from the far focus to the ray reflected at rho(x) x.

    Exact mirror arithmetic sends every ray from the origin through the far
    focus, so this is a pure floating-point residual (<= 1e-9 |OP|).
    """
    x = np.asarray(x, dtype=float)
    rho = ellipsoid_radius(ell, x)
    point = rho[..., None] * x
    direction = reflect_direction(x, ellipsoid_normal(ell, x))
    v = ell.far_focus - point
    t = np.maximum(np.sum(v * direction, axis=-1), 0.0)
    return np.linalg.norm(v - t[..., None] * direction, axis=-1)


def radius_bounds(quadric, delta):
    """Admissible radius interval of a quadric under the delta constraint.

    Ellipsoid with d >= delta |OP|: (d/(1+c_delta), d/(1-c_delta)).
    Paraboloid over directions with x.m <= 1 - delta: (d/2, d/delta).
    """
    delta = float(delta)
    if isinstance(quadric, Ellipsoid):
        if quadric.focal_param < delta * quadric.op * (1.0 - 1e-12):
            raise ValueError("constraint violated: d < delta |OP|")
        c = float(c_delta(delta))
        return quadric.focal_param / (1.0 + c), quadric.focal_param / (1.0 - c)
    if isinstance(quadric, Paraboloid):
        if not 0.0 < delta < 1.0:
            raise ValueError("constraint violated: far-field delta outside (0, 1)")
        return quadric.focal_param / 2.0, quadric.focal_param / delta
    raise TypeError("expected an Ellipsoid or a Paraboloid")
