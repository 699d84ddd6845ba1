"""Independent verification of synthesized reflectors.

Monte Carlo forward ray tracing cross-checks the quadrature measures; the
transport-map determinant inequality is checked by central finite
differences on the upper-hemisphere chart; the constant-weight classical
solve is compared against the inverse-square measure; obstruction checks
march along reflected segments and test for envelope re-crossings.

Rays use a counter-based RNG keyed by (seed, batch index), so results are
reproducible bit for bit regardless of how batches are scheduled; the env
var LUMEN_THREADS caps the worker pool used for ray batches.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .envelope import Reflector, WeightModel, reflector_measure
from .geometry import reflect_direction
from .solver import SolverConfig, SolveReport, check_energy_condition, solve_discrete
from .sphere import DomainSpec, IntensityField, SphericalGrid, TargetMeasure

__all__ = [
    "ObstructionReport",
    "RayTraceResult",
    "TransportCheck",
    "WeightComparison",
    "compare_constant_weight",
    "obstruction_raycheck",
    "raytrace",
    "sample_directions",
    "transport_residual",
]

_BATCH = 1 << 16


def _worker_count():
    env = os.environ.get("LUMEN_THREADS", "")
    try:
        return max(1, min(int(env), 64)) if env else 1
    except ValueError:
        return 1


def _orthonormal_frame(axis):
    a = np.asarray(axis, dtype=float)
    helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(a, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(a, e1)


def _cap_points(axis, half_angle, u):
    """Map uniform pairs u in [0,1)^2 to uniform points on the cap."""
    e1, e2 = _orthonormal_frame(axis)
    z = 1.0 - u[:, 0] * (1.0 - np.cos(half_angle))
    phi = 2.0 * np.pi * u[:, 1]
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return (
        r[:, None] * np.cos(phi)[:, None] * e1
        + r[:, None] * np.sin(phi)[:, None] * e2
        + z[:, None] * np.asarray(axis, float)
    )


def sample_directions(domain: DomainSpec, n, seed=0):
    """n directions uniform over the domain (cap sampling is exact;
    polygons reject from their enclosing cap), deterministic in seed."""
    axis, half = domain.enclosing_cap()
    out = []
    total = 0
    batch = 0
    while total < n:
        rng = np.random.Generator(np.random.Philox(key=[seed, batch]))
        u = rng.random((_BATCH, 2))
        pts = _cap_points(axis, half, u)
        if domain.kind == "polygon":
            pts = pts[domain.contains(pts)]
        out.append(pts)
        total += pts.shape[0]
        batch += 1
    return np.concatenate(out, axis=0)[:n]


# ---------------------------------------------------------------------------
# Monte Carlo ray tracing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RayTraceResult:
    totals: np.ndarray  # per-atom weighted flux estimates (W)
    stderr: np.ndarray
    focus_miss_max: np.ndarray  # per-atom worst distance of the ray to its focus
    n_rays: int
    total_estimate: float  # traced estimate of the whole-domain integral
    unmatched_count: int  # rays matching no atom within tolerance
    unmatched_weight: float


def _trace_batch(reflector, intensity, domain, f_max, total_flux, weight,
                 seed, batch, match_tol):
    """Trace one deterministic candidate batch; returns accepted per-ray
    contributions, attributions, and focus misses."""
    rng = np.random.Generator(np.random.Philox(key=[seed, batch]))
    axis, half = domain.enclosing_cap()
    u = rng.random((_BATCH, 3))
    x = _cap_points(axis, half, u[:, :2])
    keep = domain.contains(x) if domain.kind == "polygon" else np.ones(_BATCH, bool)
    fx = np.asarray(intensity(x), dtype=float)
    keep &= u[:, 2] * f_max <= fx
    x = x[keep]
    if x.shape[0] == 0:
        empty = np.empty(0)
        return empty, np.empty(0, np.int64), empty

    rho, winner, _ = reflector.radius(x)
    nu = reflector.normal_at(x, winner)
    y = reflect_direction(x, nu)
    hit = rho[:, None] * x
    contrib = total_flux * weight(np.sum(x * nu, axis=1), rho)

    if reflector.kind == "near":
        n_atoms = reflector.atom_count
        dist = np.empty((x.shape[0], n_atoms))
        for i in range(n_atoms):
            v = reflector.anchors[i] - hit
            t = np.maximum(np.sum(v * y, axis=1), 0.0)
            dist[:, i] = np.linalg.norm(v - t[:, None] * y, axis=1)
        matched = np.argmin(dist, axis=1)
        miss = dist[np.arange(x.shape[0]), matched]
        ok = miss <= match_tol
    else:
        dots = y @ reflector.anchors.T
        matched = np.argmax(dots, axis=1)
        miss = 1.0 - dots[np.arange(x.shape[0]), matched]
        ok = miss <= 1e-12
    matched = np.where(ok, matched, -1)
    return contrib, matched, miss


def raytrace(
    reflector: Reflector,
    intensity: IntensityField,
    domain: DomainSpec,
    n_rays,
    seed=0,
    weight: Optional[WeightModel] = None,
    match_tol=None,
) -> RayTraceResult:
    """Estimate the per-atom delivered measure with n_rays forward rays.

    Directions are drawn proportional to the intensity by rejection from
    its node maximum; each accepted ray contributes total_flux * F / n to
    the atom whose focus (near) or direction (far) the reflected ray
    matches. Unmatched rays are counted, never dropped silently.
    """
    weight = weight or WeightModel.inverse_square()
    n_rays = int(n_rays)
    if match_tol is None:
        scale = float(np.max(reflector.op)) if reflector.kind == "near" else 1.0
        match_tol = 1e-6 * scale
    f_max = float(np.max(intensity.values)) * 1.05 + 1e-300
    total_flux = intensity.total_flux

    contribs, matches, misses = [], [], []
    accepted = 0
    batch = 0
    workers = _worker_count()
    while accepted < n_rays:
        todo = list(range(batch, batch + max(workers, 1)))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(
                    pool.map(
                        lambda b: _trace_batch(
                            reflector, intensity, domain, f_max, total_flux,
                            weight, seed, b, match_tol,
                        ),
                        todo,
                    )
                )
        else:
            results = [
                _trace_batch(reflector, intensity, domain, f_max, total_flux,
                             weight, seed, b, match_tol)
                for b in todo
            ]
        for c, m, d in results:  # batch order fixes the reduction order
            contribs.append(c)
            matches.append(m)
            misses.append(d)
            accepted += c.shape[0]
        batch += len(todo)

    contrib = np.concatenate(contribs)[:n_rays]
    matched = np.concatenate(matches)[:n_rays]
    miss = np.concatenate(misses)[:n_rays]

    n_atoms = reflector.atom_count
    totals = np.zeros(n_atoms)
    stderr = np.zeros(n_atoms)
    miss_max = np.zeros(n_atoms)
    for i in range(n_atoms):
        sel = matched == i
        z = np.where(sel, contrib, 0.0)
        totals[i] = float(np.sum(z)) / n_rays
        var = float(np.sum(z * z)) / n_rays - (float(np.sum(z)) / n_rays) ** 2
        stderr[i] = np.sqrt(max(var, 0.0) / n_rays)
        if np.any(sel):
            miss_max[i] = float(np.max(miss[sel]))
    unmatched = matched < 0
    return RayTraceResult(
        totals=totals,
        stderr=stderr,
        focus_miss_max=miss_max,
        n_rays=n_rays,
        total_estimate=float(np.sum(contrib)) / n_rays,
        unmatched_count=int(np.sum(unmatched)),
        unmatched_weight=float(np.sum(contrib[unmatched])) / n_rays,
    )


# ---------------------------------------------------------------------------
# Transport determinant inequality
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransportCheck:
    samples: np.ndarray  # chart points actually checked
    lhs: np.ndarray  # |det DT|
    rhs: np.ndarray  # f (X.nu) / (sqrt(1-|x|^2) rho^2 g(T))
    violations: int
    max_violation: float
    skipped: int  # tie-adjacent or chart-degenerate samples
    h: float
    tol_coeff: float


def _chart_lift(xy):
    xy = np.atleast_2d(xy)
    r2 = np.sum(xy * xy, axis=1)
    if np.any(r2 >= 1.0):
        raise ValueError("chart point outside the open unit disk")
    return np.column_stack([xy, np.sqrt(1.0 - r2)])


def _plane_hits(reflector, xy):
    """Map chart points to target-plane points via one mirror bounce;
    returns (hit xy, winner, tie, rho, cos incidence, valid)."""
    x3 = _chart_lift(xy)
    rho, winner, tie = reflector.radius(x3)
    nu = reflector.normal_at(x3, winner)
    y = reflect_direction(x3, nu)
    start = rho[:, None] * x3
    valid = y[:, 2] < -1e-12
    t = np.where(valid, -start[:, 2] / np.where(valid, y[:, 2], -1.0), 0.0)
    z = start + t[:, None] * y
    return z[:, :2], winner, tie, rho, np.sum(x3 * nu, axis=1), valid


def transport_residual(
    reflector: Reflector,
    intensity,
    density: Callable[[np.ndarray], np.ndarray],
    samples,
    h=1e-4,
    tol_coeff=2.0,
) -> TransportCheck:
    """Check |det DT| <= f (X.nu) / (sqrt(1-|x|^2) rho^2 g(T(x))) at chart
    samples, DT by central differences with step h.

    The inequality is asserted only where the surface is smooth: samples
    whose five-point stencil changes winner, meets a tie flag, or fails to
    reach the target plane are skipped and counted. The comparison
    tolerance scales with h.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n = samples.shape[0]
    offsets = np.array([[0.0, 0.0], [h, 0.0], [-h, 0.0], [0.0, h], [0.0, -h]])
    stencil = (samples[:, None, :] + offsets[None, :, :]).reshape(-1, 2)
    z, winner, tie, rho, cosi, valid = _plane_hits(reflector, stencil)
    z = z.reshape(n, 5, 2)
    winner = winner.reshape(n, 5)
    tie = tie.reshape(n, 5)
    rho = rho.reshape(n, 5)
    cosi = cosi.reshape(n, 5)
    valid = valid.reshape(n, 5)

    smooth = (
        np.all(valid, axis=1)
        & np.all(~tie, axis=1)
        & np.all(winner == winner[:, :1], axis=1)
    )
    kept = samples[smooth]
    if kept.shape[0] == 0:
        return TransportCheck(kept, np.empty(0), np.empty(0), 0, 0.0, n, h, tol_coeff)

    zk = z[smooth]
    d1 = (zk[:, 1, :] - zk[:, 2, :]) / (2.0 * h)
    d2 = (zk[:, 3, :] - zk[:, 4, :]) / (2.0 * h)
    lhs = np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    f_vals = np.asarray(
        intensity(_chart_lift(kept)) if callable(intensity) else intensity,
        dtype=float,
    )
    g_vals = np.asarray(density(zk[:, 0, :]), dtype=float)
    sqrt_term = np.sqrt(1.0 - np.sum(kept * kept, axis=1))
    with np.errstate(divide="ignore"):
        rhs = f_vals * cosi[smooth, 0] / (sqrt_term * rho[smooth, 0] ** 2 * g_vals)
    tol = tol_coeff * h * np.maximum(1.0, np.where(np.isfinite(rhs), rhs, 1.0))
    excess = lhs - rhs - tol
    bad = excess > 0.0
    return TransportCheck(
        samples=kept,
        lhs=lhs,
        rhs=rhs,
        violations=int(np.sum(bad)),
        max_violation=float(np.max(excess)) if np.any(bad) else 0.0,
        skipped=int(n - kept.shape[0]),
        h=h,
        tol_coeff=tol_coeff,
    )


# ---------------------------------------------------------------------------
# Constant-weight comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightComparison:
    mu_star: np.ndarray  # inverse-square measure of the constant-weight solve
    eta: np.ndarray
    gap: float  # mu*(E) - eta(E), E = target minus the overshoot atom
    gap_rel: float  # gap / eta(D)
    bound_factor: float  # ((1+c)/(1-c))^5 - 1
    bound: float
    report: SolveReport


def compare_constant_weight(
    intensity: IntensityField,
    target: TargetMeasure,
    config: SolverConfig,
    grid: SphericalGrid,
) -> WeightComparison:
    """Solve the classical pure-flux matching problem (constant weight,
    prescriptions eta/C) and measure its reflector with the inverse-square
    weight; the excess over eta away from the overshoot atom is positive
    and bounded by (((1+c)/(1-c))^5 - 1) eta(D).

    Requires the equality calibration flux = eta(D)/C(delta, k delta, M)
    and the least admissible k.
    """
    config = config.validated("near")
    from .geometry import c_delta as _cd

    c = float(_cd(config.delta))
    k_min = (1.0 + c) / (1.0 - c)
    if abs(config.k - k_min) > 1e-9 * k_min:
        raise ValueError("comparison requires the least admissible k = (1+c)/(1-c)")
    feas = check_energy_condition(intensity, target, config)
    calibration = feas.eta_total / feas.constant
    if abs(intensity.total_flux - calibration) > 1e-9 * max(intensity.total_flux, 1e-300):
        raise ValueError(
            "equality calibration violated: flux must equal eta(D)/C "
            f"({intensity.total_flux:.12g} vs {calibration:.12g})"
        )

    scaled = TargetMeasure.discrete(
        target.points, target.masses / feas.constant, target.overshoot_index
    )
    report = solve_discrete(intensity, scaled, config, grid, WeightModel.constant())
    mu_star = reflector_measure(report.reflector, grid, intensity,
                                WeightModel.inverse_square(), report.assignment)
    keep = np.arange(target.atom_count) != target.overshoot_index
    gap = float(np.sum(mu_star.per_atom[keep] - target.masses[keep]))
    factor = ((1.0 + c) / (1.0 - c)) ** 5 - 1.0
    return WeightComparison(
        mu_star=mu_star.per_atom,
        eta=target.masses.copy(),
        gap=gap,
        gap_rel=gap / target.total,
        bound_factor=factor,
        bound=factor * target.total,
        report=report,
    )


# ---------------------------------------------------------------------------
# Obstruction ray check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObstructionReport:
    violations: int
    checked: int
    max_excess: float  # worst relative radial excursion outside the body


def obstruction_raycheck(reflector: Reflector, directions, n_steps=48,
                         margin=1e-7) -> ObstructionReport:
    """March each reflected segment from the surface to its focus and flag
    any point that leaves the envelope body (the mirror would block it).

    With every focus strictly inside the body the convexity of the envelope
    keeps all segments interior, so no violations occur.
    """
    if reflector.kind != "near":
        raise ValueError("obstruction checks apply to near-field reflectors")
    x = np.atleast_2d(np.asarray(directions, dtype=float))
    rho, winner, _ = reflector.radius(x)
    start = rho[:, None] * x
    target = reflector.anchors[winner]
    seg = target - start
    bad = np.zeros(x.shape[0], dtype=bool)
    worst = 0.0
    for j in range(1, n_steps + 1):
        t = j / (n_steps + 1.0)
        q = start + t * seg
        qn = np.linalg.norm(q, axis=1)
        q_hat = q / qn[:, None]
        rho_q, _, _ = reflector.radius(q_hat)
        excess = qn / rho_q - 1.0
        bad |= excess > margin
        worst = max(worst, float(np.max(excess)))
    return ObstructionReport(int(np.sum(bad)), x.shape[0], worst)
