"""Feasibility gating and the envelope measure-matching solvers.

The discrete solver pins the overshoot atom's focal parameter (k delta M
near, a' far) and starts every other sheet high enough that all flux lands
on the overshoot atom. It then sweeps the remaining atoms, relocating each
focal parameter by bisection to the point where that atom's delivered
measure crosses its prescription from below. Shrinking one focal parameter
never raises another atom's measure, so cold-started sweeps descend
monotonically toward the componentwise-inf solution; warm-started sweeps
may also expand a bracket upward. Brackets are sign-verified with a scan
fallback, since per-atom monotonicity in its own focal parameter is
assumed, not proven.

General planar-density targets are solved through nested cell partitions
whose discrete solutions converge uniformly; refinement stops after the
configured number of levels or when the sup-norm change of the radius
between levels drops under the uniform tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .envelope import (
    FocalVector,
    MeasureVector,
    Reflector,
    RegionAssignment,
    WeightModel,
    assign_regions,
    reflector_measure,
)
from .errors import ConvergenceError, FeasibilityError, FloorError, MinimalityViolation
from .geometry import c_delta
from .sphere import (
    CellPartition,
    IntensityField,
    SphericalGrid,
    TargetMeasure,
    build_partition,
    refine_partition,
)

__all__ = [
    "FeasibilityCheck",
    "GeneralSolveReport",
    "OptimalDelta",
    "SolveReport",
    "SolverConfig",
    "VisibilityReport",
    "check_energy_condition",
    "feasibility_constant",
    "feasibility_constant_far",
    "feasibility_rate",
    "lower_bound_constant",
    "optimal_delta",
    "overshoot_minimality_check",
    "solve_discrete",
    "solve_general",
    "visibility_report",
]


# ---------------------------------------------------------------------------
# Constants and feasibility
# ---------------------------------------------------------------------------


def lower_bound_constant(delta, delta_prime, M):
    """Least value of (x.nu)/rho^2 over envelopes with d_1 <= delta' M and
    every d_i >= delta M: (1-c)^3 / ((1+c) (delta' M)^2)."""
    if delta <= 0.0 or delta_prime < delta or M <= 0.0:
        raise ValueError("need 0 < delta <= delta' and M > 0")
    c = float(c_delta(delta))
    return (1.0 - c) ** 3 / ((1.0 + c) * (delta_prime * M) ** 2)


def feasibility_constant(delta, k, M):
    """Near-field energy constant C(delta, k delta, M); requires
    k >= (1+c)/(1-c) so the pinned overshoot sheet can clear the floor."""
    if delta <= 0.0 or M <= 0.0:
        raise ValueError("delta and M must be positive")
    c = float(c_delta(delta))
    if k < (1.0 + c) / (1.0 - c) * (1.0 - 1e-12):
        raise ValueError(f"k must be at least (1+c)/(1-c) = {(1 + c) / (1 - c)}")
    return lower_bound_constant(delta, k * delta, M)


def feasibility_constant_far(a_prime, delta):
    """Far-field energy constant C(a', delta) = delta^3 / (2 a'^2)."""
    if not 0.0 < delta < 1.0:
        raise ValueError("far-field delta must lie in (0, 1)")
    if a_prime <= 0.0:
        raise ValueError("a' must be positive")
    return delta**3 / (2.0 * a_prime**2)


@dataclass(frozen=True)
class SolverConfig:
    """Knobs of a solve. Near field uses (delta, k); far field uses
    (delta, a, a_prime) with the domain margin x.m <= 1 - delta."""

    delta: float
    k: Optional[float] = None
    a: Optional[float] = None
    a_prime: Optional[float] = None
    resolution: int = 20000
    residual_tol: float = 1e-3
    max_sweeps: int = 200
    bisection_tol: float = 1e-9
    init_margin: float = 1.25
    eps0: Optional[float] = None
    levels: int = 3
    uniform_tol: float = 0.0

    def validated(self, kind):
        if kind == "near":
            if self.delta <= 0.0:
                raise ValueError("delta must be positive")
            c = float(c_delta(self.delta))
            k_min = (1.0 + c) / (1.0 - c)
            k = self.k if self.k is not None else k_min
            if k < k_min * (1.0 - 1e-12):
                raise ValueError(f"k must be at least (1+c)/(1-c) = {k_min}")
            return replace(self, k=float(k))
        if not 0.0 < self.delta < 1.0:
            raise ValueError("far-field delta must lie in (0, 1)")
        if self.a is None or self.a <= 0.0:
            raise ValueError("far field needs a > 0")
        a_prime = self.a_prime if self.a_prime is not None else 4.0 * self.a / self.delta
        if a_prime < 4.0 * self.a / self.delta * (1.0 - 1e-12):
            raise ValueError("a' must be at least 4 a / delta")
        return replace(self, a_prime=float(a_prime))

    def weight_domain(self, kind, M=None):
        """(u_range, v_range) box on which the weight model must be
        positive, matching the admissible class bounds."""
        if kind == "near":
            c = float(c_delta(self.delta))
            d1 = self.k * self.delta * M
            return ((1.0 - c) / (1.0 + c), 1.0), (self.delta * M / (1.0 + c), d1 / (1.0 - c))
        return (self.delta / 2.0, 1.0), (self.a, self.a_prime / self.delta)


@dataclass(frozen=True)
class FeasibilityCheck:
    feasible: bool
    margin: float
    constant: float
    total_flux: float
    eta_total: float


def check_energy_condition(
    intensity: IntensityField,
    target: TargetMeasure,
    config: SolverConfig,
    weight: Optional[WeightModel] = None,
) -> FeasibilityCheck:
    """Compare the input flux against eta(D)/C, C being the minimum of the
    radiometric weight over the admissible (incidence, radius) box."""
    kind = "far" if target.kind == "far-directions" else "near"
    config = config.validated(kind)
    weight = weight or WeightModel.inverse_square()
    if weight.name == "inverse-square":
        if kind == "near":
            constant = feasibility_constant(config.delta, config.k, target.max_op)
        else:
            constant = feasibility_constant_far(config.a_prime, config.delta)
    else:
        m_scale = target.max_op if kind == "near" else None
        constant = weight.min_on_box(*config.weight_domain(kind, m_scale))
    eta = target.total
    margin = intensity.total_flux - eta / constant
    return FeasibilityCheck(margin >= 0.0, float(margin), float(constant),
                            intensity.total_flux, float(eta))


# ---------------------------------------------------------------------------
# Sweep workspace
# ---------------------------------------------------------------------------


class _SweepState:
    """Mutable envelope over the grid during a solve.

    Keeps per-atom radius and incidence rows in sync with the focal
    parameters, plus a maintained two-smallest structure over atoms per
    node so a sweep visit costs O(nodes) rather than O(atoms x nodes).
    """

    def __init__(self, kind, anchors, d, grid, intensity, weight):
        self.kind = kind
        self.anchors = np.atleast_2d(np.asarray(anchors, float))
        self.grid = grid
        self.psi_base = grid.weights * intensity.values
        self.weight = weight
        if kind == "near":
            self.op = np.linalg.norm(self.anchors, axis=1)
            self.S = (self.anchors / self.op[:, None]) @ grid.nodes.T
        else:
            self.S = self.anchors @ grid.nodes.T
        self.d = np.asarray(d, float).copy()
        self.eps = np.zeros_like(self.d)
        self.last_move = np.full_like(self.d, np.inf)  # widens first windows
        self.R = np.empty_like(self.S)
        for i in range(self.d.shape[0]):
            self.R[i] = self._radius_row(i, self.d[i])
        self._cols = np.arange(self.R.shape[1])
        self._rebuild_minima(slice(None))

    def _radius_row(self, i, d, s=None):
        s = self.S[i] if s is None else s
        if self.kind == "near":
            ratio = d / self.op[i]
            eps = 1.0 / (np.sqrt(1.0 + ratio * ratio) + ratio)
            self.eps[i] = eps
            return d / (1.0 - eps * s)
        return d / (1.0 - s)

    def _rebuild_minima(self, where):
        """Recompute the two smallest rows (value and atom) per column on
        ``where``; the first minimum matches argmin's least-index tie rule."""
        sub = self.R[:, where]
        if self.d.shape[0] == 1:
            a1 = np.zeros(sub.shape[1], dtype=np.int64)
            filler = (np.full(sub.shape[1], np.inf), np.zeros(sub.shape[1], np.int64))
            pick = (sub[0], a1)
        else:
            order = np.argpartition(sub, 1, axis=0)[:2]
            cols = np.arange(sub.shape[1])
            va, vb = sub[order[0], cols], sub[order[1], cols]
            swap = (vb < va) | ((vb == va) & (order[1] < order[0]))
            pick = (np.where(swap, vb, va), np.where(swap, order[1], order[0]))
            filler = (np.where(swap, va, vb), np.where(swap, order[0], order[1]))
        if isinstance(where, slice):
            self.m1, self.a1 = pick
            self.m2, self.a2 = filler
        else:
            self.m1[where], self.a1[where] = pick
            self.m2[where], self.a2[where] = filler

    def commit(self, i, d):
        self.last_move[i] = abs(d - self.d[i])
        self.d[i] = d
        rho = self._radius_row(i, d)
        affected = (self.a1 == i) | (self.a2 == i) | (rho < self.m2)
        self.R[i] = rho
        idx = np.nonzero(affected)[0]
        if idx.size:
            self._rebuild_minima(idx)

    def visit(self, i, lo_bound):
        """Bisection context for atom i, valid for d >= lo_bound.

        Atom i wins node j exactly while d stays under the node's capture
        threshold: the focal parameter of the sheet through the competing
        surface point (radius increases strictly with d). Thresholds are
        closed-form, so sorting them once makes each measure evaluation a
        contiguous suffix sum over the currently captured nodes.
        """
        val = np.where(self.a1 == i, self.m2, self.m1)
        if self.kind == "near":
            ratio = lo_bound / self.op[i]
            eps_lo = 1.0 / (np.sqrt(1.0 + ratio * ratio) + ratio)
            rho_lo = lo_bound / (1.0 - eps_lo * self.S[i])
        else:
            rho_lo = lo_bound / (1.0 - self.S[i])
        cand = rho_lo < val  # capture sets shrink as d grows
        s_c = self.S[i][cand]
        v_c = val[cand]
        if self.kind == "near":
            op = self.op[i]
            # two-focus form of the sheet through the point val * x_hat
            chord = np.sqrt(v_c * v_c + op * op - 2.0 * v_c * op * s_c)
            csum = v_c + chord
            thresh = (csum * csum - op * op) / (2.0 * csum)
        else:
            thresh = v_c * (1.0 - s_c)
        order = np.argsort(thresh, kind="stable")
        t_sorted = thresh[order]
        s = s_c[order]
        psi = self.psi_base[cand][order]
        inv_sq = self.weight.name == "inverse-square"

        if self.kind == "near":

            def mu(d):
                pos = np.searchsorted(t_sorted, d, side="right")
                if pos >= t_sorted.shape[0]:
                    return 0.0
                ratio = d / op
                eps = 1.0 / (np.sqrt(1.0 + ratio * ratio) + ratio)
                sw = s[pos:]
                denom = 1.0 - eps * sw
                back = np.sqrt(1.0 - 2.0 * eps * sw + eps * eps)
                if inv_sq:
                    return float(np.sum(psi[pos:] * denom**3 / (back * d * d)))
                rho = d / denom
                return float(np.sum(psi[pos:] * self.weight(denom / back, rho)))

        else:

            def mu(d):
                pos = np.searchsorted(t_sorted, d, side="right")
                if pos >= t_sorted.shape[0]:
                    return 0.0
                sw = s[pos:]
                one_minus = 1.0 - sw
                if inv_sq:
                    return float(
                        np.sum(psi[pos:] * np.sqrt(one_minus / 2.0)
                               * one_minus * one_minus) / (d * d)
                    )
                rho = d / one_minus
                return float(np.sum(psi[pos:] * self.weight(np.sqrt(one_minus / 2.0), rho)))

        hi_cap = float(t_sorted[-1]) * (1.0 + 1e-12) if t_sorted.size else lo_bound
        return mu, hi_cap

    def mu_all(self):
        rho = self.R[self.a1, self._cols]
        s = self.S[self.a1, self._cols]
        if self.kind == "near":
            e = self.eps[self.a1]
            u = (1.0 - e * s) / np.sqrt(1.0 - 2.0 * e * s + e * e)
        else:
            u = np.sqrt((1.0 - s) / 2.0)
        psi = self.psi_base * self.weight(u, rho)
        return np.bincount(self.a1, weights=psi, minlength=self.d.shape[0])


def _bisect_atom(state, i, target_mass, floor, cap, w_tol, residual_tol):
    """Move atom i's focal parameter to the crossing of its measure with the
    prescription; returns (committed d, floor-pinned flag).

    The capture context is first built for a local bracket below the
    current focal parameter (cheap once the sweeps are near their fixed
    point) and rebuilt from the admissibility floor only when the crossing
    lies deeper.
    """
    d_cur = float(state.d[i])
    pad = max(6.0 * float(state.last_move[i]), 3e-4 * d_cur)
    local_lo = max(floor, d_cur - pad)
    mu, hi_cap = state.visit(i, local_lo)
    top = min(cap, max(hi_cap, floor * (1.0 + 1e-9)))

    mu_cur = mu(d_cur)
    if mu_cur > target_mass:
        # sheet too low: above the last capture threshold it sheds all mass
        lo, mu_lo = d_cur, mu_cur
        hi, mu_hi = top, mu(top)
        if mu_hi > target_mass:
            state.commit(i, hi)
            return hi, False
    else:
        hi, mu_hi = d_cur, mu_cur
        lo = local_lo
        mu_lo = mu(lo)
        for wider in (d_cur - 8.0 * pad, 0.8 * d_cur, floor):
            # crossing below the local bracket: widen the capture context
            if mu_lo >= target_mass or lo <= floor:
                break
            lo = max(floor, wider)
            mu, hi_cap = state.visit(i, lo)
            mu_lo = mu(lo)
        if mu_lo < target_mass:
            if mu_lo < mu_hi - 1e-15 * max(1.0, mu_hi):
                # non-monotone bracket: rebuild from a logarithmic scan
                grid_d = np.geomspace(floor, max(hi, floor * 1.0001), 64)
                vals = [mu(g) for g in grid_d]
                above = [j for j, v in enumerate(vals) if v >= target_mass]
                if above:
                    jlo = above[-1]
                    jhi = min(jlo + 1, len(grid_d) - 1)
                    lo, mu_lo = float(grid_d[jlo]), vals[jlo]
                    hi, mu_hi = float(grid_d[jhi]), vals[jhi]
                else:
                    state.commit(i, floor)
                    return floor, True
            else:
                # even the floor cannot reach the prescription now
                state.commit(i, floor)
                return floor, True

    seen_lo = False
    while hi - lo > w_tol:
        mid = 0.5 * (lo + hi)
        mu_mid = mu(mid)
        if mu_mid >= target_mass:
            lo, mu_lo, seen_lo = mid, mu_mid, True
        else:
            hi, mu_hi = mid, mu_mid

    # prefer the under side; take the over side only when it is closer and
    # overshoots by less than the residual band
    if (
        seen_lo
        and mu_lo <= target_mass * (1.0 + residual_tol)
        and abs(mu_lo - target_mass) < abs(mu_hi - target_mass)
    ):
        state.commit(i, lo)
        return lo, False
    state.commit(i, hi)
    return hi, False


def _run_sweeps(state, g, floor, cap, config, order=None, strict_descent=True):
    """Coordinate sweeps over the non-overshoot atoms until the residuals
    sit inside the band.

    The sweep iterates converge linearly, so every few sweeps the focal
    vector is extrapolated geometrically along the last sweep step (vector
    Aitken); the subsequent sweeps re-establish feasible-side membership,
    and convergence is only declared from actual measured residuals.
    """
    n = g.shape[0]
    w_tol = config.bisection_tol * floor
    idx = list(range(1, n)) if order is None else [int(j) for j in order]
    trace = []
    floored = np.zeros(n, dtype=bool)
    prev_d = state.d.copy()
    prev_step = None
    ok_streak = 0
    for sweep in range(1, config.max_sweeps + 1):
        drift = 0.0
        for i in idx:
            before = state.d[i]
            _, hit_floor = _bisect_atom(state, i, g[i], floor, cap, w_tol,
                                        config.residual_tol)
            floored[i] = hit_floor
            drift = max(drift, abs(state.d[i] - before))
        mu = state.mu_all()
        resid = np.abs(mu[1:] - g[1:]) / g[1:]
        trace.append(float(resid.max()) if resid.size else 0.0)
        ok = resid.size == 0 or resid.max() <= config.residual_tol
        ok_streak = ok_streak + 1 if ok else 0
        if ok and (drift <= 4.0 * w_tol or ok_streak >= 2):
            return sweep, trace
        if strict_descent and np.any(floored):
            bad = int(np.nonzero(floored)[0][0])
            raise FloorError(
                f"focal parameter of atom {bad} hit its floor with measure "
                f"{mu[bad]:.6g} below the prescription {g[bad]:.6g}",
                trace=trace,
            )
        if drift <= w_tol and not ok:
            break  # stationary yet out of band: no further progress possible
        step = state.d - prev_d
        if (
            prev_step is not None
            and sweep % 4 == 0
            and not ok
            and trace[-1] > 4.0 * config.residual_tol
        ):
            den = float(prev_step @ prev_step)
            ratio = float(step @ prev_step) / den if den > 0.0 else 0.0
            if 0.3 < ratio < 0.98:
                boost = step * min(ratio / (1.0 - ratio), 25.0)
                for i in idx:
                    state.commit(i, min(cap, max(floor, state.d[i] + boost[i])))
                strict_descent = False  # descent monotonicity forfeited
                prev_d = state.d.copy()
                prev_step = None
                continue
        prev_step = step
        prev_d = state.d.copy()
    mu = state.mu_all()
    resid = np.abs(mu[1:] - g[1:]) / g[1:]
    below = floored[1:] & (mu[1:] < g[1:] * (1.0 - config.residual_tol))
    if np.any(below):
        bad = 1 + int(np.nonzero(below)[0][0])
        raise FloorError(
            f"focal parameter of atom {bad} is pinned at its floor with "
            f"relative residual {resid[bad - 1]:.3g}",
            trace=trace,
        )
    raise ConvergenceError(
        f"residuals did not reach {config.residual_tol} within "
        f"{config.max_sweeps} sweeps (last {trace[-1] if trace else float('nan')})",
        trace=trace,
    )


@dataclass(frozen=True)
class SolveReport:
    """Converged focal vector and its delivered measure, in the original
    atom order of the target."""

    w: FocalVector
    mu: MeasureVector
    targets: np.ndarray
    prescribed: np.ndarray
    overshoot_index: int
    residuals: np.ndarray  # relative; nan at the overshoot atom
    overshoot: float
    sweeps: int
    tie_fraction: float
    feasibility_margin: float
    coverage: float
    converged: bool
    reflector: Reflector = field(repr=False, default=None)
    assignment: RegionAssignment = field(repr=False, default=None)

    @property
    def max_residual(self):
        r = self.residuals[np.isfinite(self.residuals)]
        return float(np.max(r)) if r.size else 0.0


def solve_discrete(
    intensity: IntensityField,
    target: TargetMeasure,
    config: SolverConfig,
    grid: SphericalGrid,
    weight: Optional[WeightModel] = None,
    warm_start=None,
    sweep_order=None,
) -> SolveReport:
    """Match a discrete target measure with an envelope reflector.

    The designated overshoot atom is processed first internally; its focal
    parameter is pinned (k delta M near, a' far) and it absorbs the excess
    flux. All other atoms are matched to the relative residual tolerance.
    ``sweep_order`` permutes the internal non-overshoot indices 1..N-1.
    """
    if target.kind not in ("discrete", "far-directions"):
        raise ValueError("solve_discrete needs a discrete or far-directions target")
    kind = "far" if target.kind == "far-directions" else "near"
    config = config.validated(kind)
    weight = weight or WeightModel.inverse_square()

    feas = check_energy_condition(intensity, target, config, weight)
    if not feas.feasible:
        raise FeasibilityError(
            f"energy condition violated: flux {feas.total_flux:.6g} below "
            f"eta/C = {feas.eta_total / feas.constant:.6g}",
            margin=feas.margin,
        )

    n = target.atom_count
    over = target.overshoot_index
    perm = np.concatenate([[over], np.delete(np.arange(n), over)])
    anchors = target.points[perm]
    g = target.masses[perm].astype(float)

    if kind == "near":
        floor = config.delta * target.max_op
        d1 = config.k * floor
        c = float(c_delta(config.delta))
        t0 = config.init_margin * config.k * (1.0 + c) / (1.0 - c)
        d_init = np.full(n, t0 * floor)
    else:
        s = anchors @ grid.nodes.T
        if np.any(s > 1.0 - config.delta + 1e-12):
            raise ValueError("far-field margin violated: x.m exceeds 1 - delta on the grid")
        floor = 2.0 * config.a
        d1 = config.a_prime
        d_init = np.full(n, config.init_margin * 2.0 * config.a_prime / config.delta)

    strict_descent = warm_start is None
    if warm_start is not None:
        warm = np.asarray(warm_start, float)[perm]
        d_init = np.where(np.isnan(warm), d_init, np.maximum(warm, floor))
    d_init[0] = d1
    cap = max(1e6 * floor, 4.0 * float(np.max(d_init)))

    state = _SweepState(kind, anchors, d_init, grid, intensity, weight)
    if n == 1:
        sweeps = 0
    else:
        sweeps, _ = _run_sweeps(state, g, floor, cap, config,
                                order=sweep_order, strict_descent=strict_descent)

    inv = np.empty(n, dtype=np.int64)
    inv[perm] = np.arange(n)
    d_orig = state.d[inv].copy()
    reflector = (
        Reflector.near(target.points, d_orig)
        if kind == "near"
        else Reflector.far(target.points, d_orig)
    )
    assignment = assign_regions(reflector, grid)
    mu = reflector_measure(reflector, grid, intensity, weight, assignment)
    residuals = np.abs(mu.per_atom - target.masses) / target.masses
    residuals[over] = np.nan
    return SolveReport(
        w=FocalVector(d_orig, kind),
        mu=mu,
        targets=target.points.copy(),
        prescribed=target.masses.copy(),
        overshoot_index=over,
        residuals=residuals,
        overshoot=float(mu.per_atom[over] - target.masses[over]),
        sweeps=sweeps,
        tie_fraction=assignment.tie_fraction,
        feasibility_margin=feas.margin,
        coverage=1.0,
        converged=True,
        reflector=reflector,
        assignment=assignment,
    )


# ---------------------------------------------------------------------------
# General measures via refinement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LevelTrace:
    level: int
    cell_count: int
    report: SolveReport
    sup_diff: Optional[float]  # sup-node |rho_level - rho_previous|


@dataclass(frozen=True)
class GeneralSolveReport:
    final: SolveReport
    levels: list
    partitions: list
    overshoot_case: str  # "overshooting" | "exact-match-suggested"

    @property
    def sup_diffs(self):
        return [t.sup_diff for t in self.levels if t.sup_diff is not None]


def solve_general(
    intensity: IntensityField,
    target: TargetMeasure,
    config: SolverConfig,
    grid: SphericalGrid,
    weight: Optional[WeightModel] = None,
) -> GeneralSolveReport:
    """Solve a planar-density target through refining cell partitions.

    Each level's discrete solve warm-starts from its parent cells' focal
    parameters, preserving the nesting of the overshoot cell. Whether the
    final reflector genuinely overshoots at the designated point is a
    quadrature-limited diagnostic, not a certified classification.
    """
    if target.kind != "planar-density":
        raise ValueError("solve_general needs a planar-density target")
    config = config.validated("near")

    partition = build_partition(target, config.eps0)
    partitions = [partition]
    traces = []
    rho_prev = None
    warm = None
    for level in range(config.levels + 1):
        discrete = partition.as_discrete(target)
        try:
            report = solve_discrete(
                intensity, discrete, config, grid, weight, warm_start=warm
            )
        except (FeasibilityError, ConvergenceError) as err:
            err.args = (f"level {level}: {err.args[0]}",) + err.args[1:]
            raise
        rho, _, _ = report.reflector.radius(grid.nodes)
        sup = float(np.max(np.abs(rho - rho_prev))) if rho_prev is not None else None
        traces.append(LevelTrace(level, len(partition.cells), report, sup))
        rho_prev = rho
        if sup is not None and config.uniform_tol > 0.0 and sup <= config.uniform_tol:
            break
        if level == config.levels:
            break
        next_partition = refine_partition(partition, target)
        warm = _inherit_warm_start(partition, next_partition, report)
        partition = next_partition
        partitions.append(partition)

    final = traces[-1].report
    over_mu = final.mu.per_atom[final.overshoot_index]
    node_floor = 2.0 * float(np.max(final.mu.per_atom)) / grid.node_count
    case = "overshooting" if over_mu > node_floor else "exact-match-suggested"
    return GeneralSolveReport(final, traces, partitions, case)


def _inherit_warm_start(parent: CellPartition, child: CellPartition, report: SolveReport):
    """Each child cell starts from the focal parameter of the parent cell
    containing its representative.

    Children carved out of the overshoot cell (other than the overshoot
    child itself) are left cold (nan): they would otherwise sit level with
    the excess-flux sheet and start flooded with its mass.
    """
    w = report.w.values
    warm = np.empty(len(child.cells))
    for j, cell in enumerate(child.cells):
        for i, pc in enumerate(parent.cells):
            if pc.contains_uv(cell.rep_uv):
                warm[j] = np.nan if pc.is_overshoot and not cell.is_overshoot else w[i]
                break
        else:
            warm[j] = np.nan
    return warm


# ---------------------------------------------------------------------------
# Optimal delta
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimalDelta:
    delta: float
    c: float
    k: float
    constant: float


def feasibility_rate(delta):
    """r(delta) = (1-c)^5 / (delta^2 (1+c)^3): the energy constant at the
    least admissible k, up to the 1/M^2 scale."""
    c = c_delta(delta)
    return (1.0 - c) ** 5 / (np.asarray(delta, float) ** 2 * (1.0 + c) ** 3)


def optimal_delta(M) -> OptimalDelta:
    """Maximize r(delta) on (0, inf).

    The derivative of r vanishes exactly where 4 c_delta - 1 changes sign
    (positive before, negative after), so the maximizer is the root of that
    factor; neighboring values of r confirm a maximum.
    """
    if M <= 0.0:
        raise ValueError("M must be positive")
    delta = float(brentq(lambda t: 4.0 * c_delta(t) - 1.0, 1e-9, 1e9, xtol=1e-14))
    r0 = float(feasibility_rate(delta))
    h = 1e-4
    if not (r0 >= feasibility_rate(delta - h) and r0 >= feasibility_rate(delta + h)):
        raise ArithmeticError("stationary point is not a maximum")
    c = float(c_delta(delta))
    return OptimalDelta(delta=delta, c=c, k=(1.0 + c) / (1.0 - c), constant=r0 / M**2)


# ---------------------------------------------------------------------------
# Visibility
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VisibilityReport:
    delta_threshold: float  # choosing delta above this avoids obstruction
    shadow_clear: bool  # no aperture direction hits the target first
    obstruction_clear: bool


def visibility_report(target: TargetMeasure, grid: SphericalGrid, delta,
                      angular_tol=1e-6) -> VisibilityReport:
    """Obstruction threshold (1 - q^2) / (2 q) with q = min|P| / (M + diam D),
    plus the aperture/target-shadow separation check."""
    q = target.min_op / (target.max_op + target.diameter)
    delta_threshold = (1.0 - q * q) / (2.0 * q)
    dirs = target.target_directions()
    if dirs.shape[0] > 512:
        dirs = dirs[:: dirs.shape[0] // 512 + 1]
    closest = float(np.max(grid.nodes @ dirs.T))
    return VisibilityReport(
        delta_threshold=float(delta_threshold),
        shadow_clear=bool(closest < np.cos(angular_tol)),
        obstruction_clear=bool(delta > delta_threshold),
    )


# ---------------------------------------------------------------------------
# Overshoot minimality
# ---------------------------------------------------------------------------


def overshoot_minimality_check(
    report: SolveReport,
    intensity: IntensityField,
    target: TargetMeasure,
    config: SolverConfig,
    grid: SphericalGrid,
    trials=5,
    seed=0,
    weight: Optional[WeightModel] = None,
) -> bool:
    """Re-solve with permuted sweep orders and perturbed starting heights;
    the focal vectors must agree componentwise within 10x the bisection
    granularity and no run may deliver less mass to the overshoot atom.

    Uniqueness of the minimizer holds for connected apertures; domain
    connectivity is not verified here.
    """
    kind = "far" if target.kind == "far-directions" else "near"
    config = config.validated(kind)
    rng = np.random.default_rng(seed)
    n = target.atom_count
    floor_scale = config.delta * target.max_op if kind == "near" else 2.0 * config.a
    tol = 10.0 * config.bisection_tol * floor_scale
    g1 = target.masses[target.overshoot_index]
    mu1_ref = report.mu.per_atom[report.overshoot_index]
    for _ in range(max(1, trials)):
        order = 1 + rng.permutation(n - 1) if n > 1 else None
        cfg = replace(config, init_margin=config.init_margin * float(rng.uniform(1.0, 2.0)))
        other = solve_discrete(intensity, target, cfg, grid, weight, sweep_order=order)
        dw = float(np.max(np.abs(other.w.values - report.w.values)))
        if dw > tol:
            raise MinimalityViolation(
                f"sweep-order resolve moved the focal vector by {dw:.3g} > {tol:.3g}",
                w_reference=report.w.values,
                w_other=other.w.values,
            )
        if other.mu.per_atom[other.overshoot_index] < mu1_ref - config.residual_tol * g1:
            raise MinimalityViolation(
                "a resolve delivered less overshoot mass than the reference",
                w_reference=report.w.values,
                w_other=other.w.values,
            )
    return True
