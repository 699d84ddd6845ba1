"""Batch front end: JSON config in, JSON/CSV/OBJ artifacts out.

Config parsing is strict: any unknown key anywhere is an error listing the
offending keys. Reports are emitted with sorted keys and no timestamps, so
identical configs and seeds produce byte-identical artifacts.

Exit codes: 0 success, 1 config or other errors, 2 feasibility failure,
3 convergence failure. On failure, stderr carries one machine-parsable
line ``<code>: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .envelope import Reflector, regularity_report
from .errors import ConfigError, ConvergenceError, FeasibilityError, IoError, LumenError
from .solver import (
    SolverConfig,
    check_energy_condition,
    optimal_delta,
    solve_discrete,
    solve_general,
    visibility_report,
)
from .sphere import (
    DomainSpec,
    IntensityField,
    PlanarPatch,
    SphericalGrid,
    TargetMeasure,
    build_grid,
)
from .validate import obstruction_raycheck, raytrace, sample_directions, transport_residual

__all__ = ["JobConfig", "main", "read_obj", "run", "write_obj"]

SCHEMA_TAG = "lumen-report/1"
SUBCOMMANDS = (
    "feasibility",
    "solve-near",
    "solve-far",
    "solve-general",
    "validate",
    "export-mesh",
    "optimal-delta",
)


# ---------------------------------------------------------------------------
# Strict config parsing
# ---------------------------------------------------------------------------


def _check_keys(block, allowed, where):
    if not isinstance(block, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def _need(block, key, where):
    if key not in block:
        raise ConfigError(f"{where}: missing required key '{key}'")
    return block[key]


@dataclass
class JobConfig:
    mode: str
    domain: DomainSpec
    raw: dict
    solver: dict
    outputs: dict

    @property
    def seed(self):
        return int(self.solver.get("seed", 0))


def _parse_domain(block):
    _check_keys(block, {"kind", "axis", "half_angle", "vertices"}, "domain")
    kind = _need(block, "kind", "domain")
    if kind == "cap":
        return DomainSpec.cap(_need(block, "axis", "domain"),
                              float(_need(block, "half_angle", "domain")))
    if kind == "hemisphere":
        return DomainSpec.hemisphere(block.get("axis", (0.0, 0.0, 1.0)))
    if kind == "sphere":
        return DomainSpec.full_sphere()
    if kind == "polygon":
        return DomainSpec.polygon(_need(block, "vertices", "domain"))
    raise ConfigError(f"domain: unknown kind '{kind}'")


def _parse_intensity(block, grid):
    _check_keys(block, {"kind", "value", "values", "path"}, "intensity")
    kind = _need(block, "kind", "intensity")
    if kind == "constant":
        return IntensityField.constant(float(_need(block, "value", "intensity")), grid)
    if kind == "node-table":
        return IntensityField.from_node_values(_need(block, "values", "intensity"), grid)
    if kind == "file":
        path = Path(_need(block, "path", "intensity"))
        try:
            rows = np.loadtxt(path, delimiter=",", ndmin=2)
        except OSError as err:
            raise IoError(f"cannot read intensity file {path}: {err}") from err
        if rows.shape[1] != 4:
            raise ConfigError("intensity file must have rows x,y,z,value")
        dirs = rows[:, :3] / np.linalg.norm(rows[:, :3], axis=1, keepdims=True)
        vals = rows[:, 3]

        def nearest(x):
            return vals[np.argmax(np.atleast_2d(x) @ dirs.T, axis=1)]

        return IntensityField(nearest, grid)
    raise ConfigError(f"intensity: unknown kind '{kind}'")


def _parse_target(block, mode):
    _check_keys(
        block,
        {
            "kind", "points", "directions", "weights", "overshoot_index",
            "origin", "u_axis", "v_axis", "u_range", "v_range",
            "density", "overshoot_uv", "samples_per_axis",
        },
        "target",
    )
    kind = _need(block, "kind", "target")
    if kind == "points":
        return TargetMeasure.discrete(
            _need(block, "points", "target"),
            _need(block, "weights", "target"),
            int(block.get("overshoot_index", 0)),
        )
    if kind == "directions":
        return TargetMeasure.directions(
            _need(block, "directions", "target"),
            _need(block, "weights", "target"),
            int(block.get("overshoot_index", 0)),
        )
    if kind == "planar":
        patch = PlanarPatch(
            np.asarray(_need(block, "origin", "target"), float),
            np.asarray(_need(block, "u_axis", "target"), float),
            np.asarray(_need(block, "v_axis", "target"), float),
            tuple(_need(block, "u_range", "target")),
            tuple(_need(block, "v_range", "target")),
        )
        dens = _need(block, "density", "target")
        _check_keys(dens, {"kind", "value", "values"}, "target.density")
        dkind = _need(dens, "kind", "target.density")
        if dkind == "constant":
            value = float(_need(dens, "value", "target.density"))
            density = lambda u, v: np.full(np.shape(u), value)  # noqa: E731
        elif dkind == "samples":
            table = np.asarray(_need(dens, "values", "target.density"), float)
            if table.ndim != 2:
                raise ConfigError("target.density: values must be a 2-d array")

            def density(u, v, _t=table, _p=patch):
                iu = np.clip(
                    ((np.asarray(u) - _p.u_range[0])
                     / (_p.u_range[1] - _p.u_range[0]) * _t.shape[0]).astype(int),
                    0, _t.shape[0] - 1,
                )
                iv = np.clip(
                    ((np.asarray(v) - _p.v_range[0])
                     / (_p.v_range[1] - _p.v_range[0]) * _t.shape[1]).astype(int),
                    0, _t.shape[1] - 1,
                )
                return _t[iu, iv]
        else:
            raise ConfigError(f"target.density: unknown kind '{dkind}'")
        return TargetMeasure.planar(
            patch,
            density,
            np.asarray(_need(block, "overshoot_uv", "target"), float),
            int(block.get("samples_per_axis", 256)),
        )
    raise ConfigError(f"target: unknown kind '{kind}'")


_SOLVER_KEYS = {
    "delta", "k", "a", "a_prime", "resolution", "residual_tol", "max_sweeps",
    "bisection_tol", "seed", "eps0", "levels", "uniform_tol",
}

_OUTPUT_KEYS = {"report", "csv", "mesh", "validate"}
_VALIDATE_KEYS = {"raytrace_rays", "obstruction_samples", "transport_samples", "transport_h"}


def load_config(path, overrides=None) -> JobConfig:
    """Parse and strictly validate a job configuration file."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as err:
        raise IoError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    _check_keys(raw, {"mode", "domain", "intensity", "target", "solver", "outputs"}, "config")
    mode = _need(raw, "mode", "config")
    if mode not in ("near", "far"):
        raise ConfigError("config: mode must be 'near' or 'far'")
    solver = dict(_need(raw, "solver", "config"))
    _check_keys(solver, _SOLVER_KEYS, "solver")
    outputs = dict(raw.get("outputs", {}))
    _check_keys(outputs, _OUTPUT_KEYS, "outputs")
    if "validate" in outputs:
        _check_keys(outputs["validate"], _VALIDATE_KEYS, "outputs.validate")
    for key, value in (overrides or {}).items():
        if value is not None:
            solver[key] = value
    domain = _parse_domain(_need(raw, "domain", "config"))
    return JobConfig(mode=mode, domain=domain, raw=raw, solver=solver, outputs=outputs)


def _resolve_solver(job: JobConfig, target, grid) -> SolverConfig:
    """Materialize the solver block; 'auto' delta/k route through the
    feasibility-optimal values and are rejected if obstructed."""
    s = dict(job.solver)
    delta = s.get("delta", "auto" if job.mode == "near" else None)
    k = s.get("k")
    if job.mode == "near":
        if delta == "auto" or k == "auto":
            best = optimal_delta(target.max_op)
            if delta == "auto":
                delta = best.delta
                vis = visibility_report(target, grid, delta)
                if delta <= vis.delta_threshold:
                    raise ConfigError(
                        f"auto delta {delta:.6g} does not clear the obstruction "
                        f"threshold {vis.delta_threshold:.6g}"
                    )
            if k == "auto":
                from .geometry import c_delta

                c = float(c_delta(float(delta)))
                k = (1.0 + c) / (1.0 - c)
    elif delta in (None, "auto"):
        raise ConfigError("far mode requires an explicit delta in (0, 1)")
    kwargs = dict(
        delta=float(delta),
        k=None if k in (None, "auto") else float(k),
        a=float(s["a"]) if "a" in s else None,
        a_prime=float(s["a_prime"]) if "a_prime" in s else None,
    )
    for key in ("resolution", "max_sweeps", "levels"):
        if key in s:
            kwargs[key] = int(s[key])
    for key in ("residual_tol", "bisection_tol", "eps0", "uniform_tol"):
        if key in s:
            kwargs[key] = float(s[key])
    return SolverConfig(**kwargs)


# ---------------------------------------------------------------------------
# Artifact emission
# ---------------------------------------------------------------------------


def _jsonify(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonify(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        if not np.isfinite(value):
            raise ValueError("report values must be finite")
        return value
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_report(path, sections):
    doc = {"schema": SCHEMA_TAG}
    doc.update(sections)
    text = json.dumps(_jsonify(doc), sort_keys=True, indent=2) + "\n"
    try:
        Path(path).write_text(text)
    except OSError as err:
        raise IoError(f"cannot write report {path}: {err}") from err


def write_atom_csv(path, report):
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "g", "mu", "residual"])
            for i in range(report.prescribed.shape[0]):
                res = report.residuals[i]
                writer.writerow([
                    i,
                    repr(float(report.prescribed[i])),
                    repr(float(report.mu.per_atom[i])),
                    "" if not np.isfinite(res) else repr(float(res)),
                ])
    except OSError as err:
        raise IoError(f"cannot write csv {path}: {err}") from err


def write_obj(path, reflector: Reflector, grid: SphericalGrid):
    """Triangle mesh of the reflector over the grid; per-vertex winning
    atom indices ride along as '# atom <vertex> <index>' comment lines."""
    rho, winner, _ = reflector.radius(grid.nodes)
    verts = rho[:, None] * grid.nodes
    lines = ["# lumen mesh schema 1"]
    for v in verts:
        lines.append(f"v {v[0]!r} {v[1]!r} {v[2]!r}")
    for i, a in enumerate(winner):
        lines.append(f"# atom {i + 1} {int(a)}")
    for f in grid.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as err:
        raise IoError(f"cannot write mesh {path}: {err}") from err


def read_obj(path):
    """Parse a mesh written by write_obj: (vertices, faces, atom indices)."""
    verts, faces, atoms = [], [], {}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p) - 1 for p in parts[1:4]])
        elif parts[0] == "#" and len(parts) == 4 and parts[1] == "atom":
            atoms[int(parts[2]) - 1] = int(parts[3])
    v = np.asarray(verts, float)
    a = np.array([atoms.get(i, -1) for i in range(len(verts))], dtype=np.int64)
    return v, np.asarray(faces, dtype=np.int64), a


# ---------------------------------------------------------------------------
# Section builders
# ---------------------------------------------------------------------------


def _feasibility_section(check):
    return {
        "feasible": check.feasible,
        "margin": check.margin,
        "constant": check.constant,
        "total_flux": check.total_flux,
        "eta_total": check.eta_total,
    }


def _solve_section(report):
    return {
        "w": report.w.values,
        "kind": report.w.kind,
        "atoms": [
            {
                "point": report.targets[i],
                "g": report.prescribed[i],
                "mu": report.mu.per_atom[i],
                "residual": None if not np.isfinite(report.residuals[i])
                else report.residuals[i],
            }
            for i in range(report.prescribed.shape[0])
        ],
        "mu_total": report.mu.total,
        "overshoot_index": report.overshoot_index,
        "overshoot": report.overshoot,
        "max_residual": report.max_residual,
        "sweeps": report.sweeps,
        "tie_fraction": report.tie_fraction,
        "coverage": report.coverage,
        "converged": report.converged,
    }


def _regularity_section(reflector, grid):
    reg = regularity_report(reflector, grid)
    return {
        "lipschitz_est": reg.lipschitz_est,
        "lipschitz_bound": reg.lipschitz_bound,
        "harnack_ratio": reg.harnack_ratio,
        "harnack_bound": reg.harnack_bound,
        "min_rho": reg.min_rho,
        "max_rho": reg.max_rho,
    }


def _validation_sections(job, report, intensity, target, grid, seed):
    toggles = job.outputs.get("validate", {})
    out = {}
    n_rays = int(toggles.get("raytrace_rays", 0))
    if n_rays > 0:
        rt = raytrace(report.reflector, intensity, grid.domain, n_rays, seed=seed)
        out["raytrace"] = {
            "totals": rt.totals,
            "stderr": rt.stderr,
            "focus_miss_max": rt.focus_miss_max,
            "n_rays": rt.n_rays,
            "total_estimate": rt.total_estimate,
            "unmatched_count": rt.unmatched_count,
        }
    n_obs = int(toggles.get("obstruction_samples", 0))
    if n_obs > 0 and report.reflector.kind == "near":
        dirs = sample_directions(grid.domain, n_obs, seed=seed + 1)
        obs = obstruction_raycheck(report.reflector, dirs)
        out["obstruction"] = {
            "violations": obs.violations,
            "checked": obs.checked,
            "max_excess": obs.max_excess,
        }
    n_tr = int(toggles.get("transport_samples", 0))
    if n_tr > 0 and target.kind == "planar-density":
        h = float(toggles.get("transport_h", 1e-4))
        rng = np.random.default_rng(seed + 2)
        axis, half = grid.domain.enclosing_cap()
        radius = float(np.sin(min(half, np.pi / 2 - 1e-3)))
        pts = rng.uniform(-radius, radius, size=(4 * n_tr, 2))
        pts = pts[np.sum(pts * pts, axis=1) < (radius - 4 * h) ** 2][:n_tr]
        tr = transport_residual(report.reflector, intensity, _world_density(target),
                                pts, h=h)
        out["transport"] = {
            "checked": int(tr.samples.shape[0]),
            "violations": tr.violations,
            "max_violation": tr.max_violation,
            "skipped": tr.skipped,
            "h": tr.h,
        }
    return out


def _world_density(target):
    """Planar density as a function of world coordinates on the plane."""
    patch = target.patch

    def g(xy):
        xy = np.atleast_2d(np.asarray(xy, float))
        pts = np.column_stack([xy, np.zeros(xy.shape[0])])
        rel = pts - patch.origin
        u = rel @ patch.u_axis
        v = rel @ patch.v_axis
        inside = (
            (u >= patch.u_range[0]) & (u <= patch.u_range[1])
            & (v >= patch.v_range[0]) & (v <= patch.v_range[1])
        )
        vals = np.asarray(target.density(u, v), float)
        return np.where(inside, vals, 0.0)

    return g


# ---------------------------------------------------------------------------
# Subcommand dispatch
# ---------------------------------------------------------------------------


def run(subcommand, config_path=None, overrides=None, out_dir=".", quiet=False,
        m_value=None):
    """Execute one subcommand; returns the process exit status."""
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand '{subcommand}'")
    if subcommand == "optimal-delta":
        best = optimal_delta(1.0 if m_value is None else float(m_value))
        print(
            f"delta*={best.delta:.6f} k*={best.k:.6f} "
            f"c*={best.c:.6f} C*={best.constant:.6f}"
        )
        return 0

    if config_path is None:
        raise ConfigError("this subcommand requires --config")
    job = load_config(config_path, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    grid = build_grid(job.domain, int(job.solver.get("resolution", 20000)))
    intensity = _parse_intensity(job.raw["intensity"], grid)
    target = _parse_target(job.raw["target"], job.mode)
    config = _resolve_solver(job, target, grid)
    seed = job.seed

    sections = {"config": job.raw, "resolved": {
        "delta": config.delta, "k": config.k, "a": config.a,
        "a_prime": config.a_prime, "resolution": config.resolution,
        "residual_tol": config.residual_tol, "seed": seed,
        "grid_nodes": grid.node_count,
    }}

    check = check_energy_condition(intensity, target, config)
    sections["feasibility"] = _feasibility_section(check)
    if target.kind != "far-directions":
        vis = visibility_report(target, grid, config.delta)
        sections["visibility"] = {
            "delta_threshold": vis.delta_threshold,
            "shadow_clear": vis.shadow_clear,
            "obstruction_clear": vis.obstruction_clear,
        }

    report_path = out / job.outputs.get("report", "report.json")
    if subcommand == "feasibility":
        write_report(report_path, sections)
        if not check.feasible:
            raise FeasibilityError(
                f"margin {check.margin:.6g} below zero", margin=check.margin
            )
        if not quiet:
            print(f"feasible margin={check.margin:.6g} report={report_path}")
        return 0

    wants = {
        "solve-near": ("near", ("discrete",)),
        "solve-far": ("far", ("far-directions",)),
        "solve-general": ("near", ("planar-density",)),
        "validate": (job.mode, ("discrete", "far-directions", "planar-density")),
        "export-mesh": (job.mode, ("discrete", "far-directions", "planar-density")),
    }[subcommand]
    if job.mode != wants[0]:
        raise ConfigError(f"{subcommand} requires mode '{wants[0]}'")
    if target.kind not in wants[1]:
        raise ConfigError(f"{subcommand} does not accept target kind '{target.kind}'")

    if target.kind == "planar-density":
        general = solve_general(intensity, target, config, grid)
        report = general.final
        sections["levels"] = [
            {
                "level": t.level,
                "cells": t.cell_count,
                "max_residual": t.report.max_residual,
                "sup_diff": t.sup_diff,
            }
            for t in general.levels
        ]
        sections["overshoot_case"] = general.overshoot_case
    else:
        report = solve_discrete(intensity, target, config, grid)

    sections["solve"] = _solve_section(report)
    sections["regularity"] = _regularity_section(report.reflector, grid)
    if subcommand == "validate":
        sections["validation"] = _validation_sections(
            job, report, intensity, target, grid, seed
        )

    write_report(report_path, sections)
    if "csv" in job.outputs:
        write_atom_csv(out / job.outputs["csv"], report)
    if subcommand == "export-mesh" or "mesh" in job.outputs:
        write_obj(out / job.outputs.get("mesh", "mesh.obj"), report.reflector, grid)
    if not quiet:
        print(
            f"ok max_residual={report.max_residual:.3g} "
            f"overshoot={report.overshoot:.6g} report={report_path}"
        )
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="lumen",
        description="Reflector synthesis under the inverse-square law",
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", default=None, help="path to the JSON job config")
    parser.add_argument("--seed", type=int, default=None, help="RNG seed override")
    parser.add_argument("--resolution", type=int, default=None,
                        help="grid node-count hint override")
    parser.add_argument("--tol", type=float, default=None,
                        help="relative residual tolerance override")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--quiet", action="store_true")
    parser.add_argument("--M", type=float, default=None,
                        help="target scale for optimal-delta")
    args = parser.parse_args(argv)

    overrides = {"seed": args.seed, "resolution": args.resolution,
                 "residual_tol": args.tol}
    try:
        return run(
            args.subcommand,
            config_path=args.config,
            overrides=overrides,
            out_dir=args.out,
            quiet=args.quiet,
            m_value=args.M,
        )
    except LumenError as err:
        print(f"{err.code}: {err}", file=sys.stderr)
        return err.exit_status
    except ValueError as err:
        print(f"config-error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
