import numpy as np
import pytest
from scipy.integrate import dblquad

from lumen.errors import NumericError
from lumen.sphere import (
    DomainSpec,
    IntensityField,
    PlanarPatch,
    TargetMeasure,
    build_grid,
    build_partition,
    integrate,
    refine_partition,
)


class TestDomains:
    def test_cap_area(self):
        assert DomainSpec.cap((0, 0, 1), np.pi / 3).area() == pytest.approx(np.pi)
        assert DomainSpec.hemisphere().area() == pytest.approx(2 * np.pi)
        assert DomainSpec.full_sphere().area() == pytest.approx(4 * np.pi)

    def test_contains(self):
        cap = DomainSpec.cap((0, 0, 1), np.pi / 3)
        assert cap.contains(np.array([0.0, 0.0, 1.0]))
        assert not cap.contains(np.array([1.0, 0.0, 0.0]))

    def test_polygon(self):
        tri = DomainSpec.polygon([[1, 0, 0.4], [0, 1, 0.4], [-1, -1, 1.2]])
        centroid = np.array([0.0, 0.0, 1.0])
        assert tri.contains(centroid)
        assert not tri.contains(np.array([0.0, 0.0, -1.0]))

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            DomainSpec.cap((0, 0, 0), 1.0)
        with pytest.raises(ValueError):
            DomainSpec.cap((0, 0, 1), 0.0)
        with pytest.raises(ValueError):
            DomainSpec.polygon([[1, 0, 0], [0, 1, 0]])


class TestGrid:
    def test_areas_at_default_resolution(self):
        for dom, exact in [
            (DomainSpec.full_sphere(), 4 * np.pi),
            (DomainSpec.hemisphere(), 2 * np.pi),
            (DomainSpec.cap((0, 0, 1), np.pi / 3), np.pi),
        ]:
            grid = build_grid(dom, 20000)
            assert grid.total_weight == pytest.approx(exact, rel=1e-3)

    def test_node_invariants(self):
        grid = build_grid(DomainSpec.cap((0.1, 0.2, 1.0), 0.8), 5000)
        assert np.max(np.abs(np.linalg.norm(grid.nodes, axis=1) - 1.0)) <= 1e-14
        assert np.all(grid.weights > 0.0)
        assert np.all(grid.domain.contains(grid.nodes, tol=1e-9))

    def test_area_error_halves_when_resolution_doubles(self):
        for dom, exact in [
            (DomainSpec.cap((0, 0, 1), np.pi / 3), np.pi),
            (DomainSpec.cap((0, 0, 1), 1.2), 2 * np.pi * (1 - np.cos(1.2))),
        ]:
            errs = []
            for hint in (600, 2400, 9600):
                grid = build_grid(dom, hint)
                errs.append(abs(grid.total_weight - exact))
            for coarse, fine in zip(errs, errs[1:]):
                if coarse < 1e-12:  # boundary resolved exactly
                    continue
                assert fine <= coarse / 2.0

    def test_nested_refinement(self):
        coarse = build_grid(DomainSpec.hemisphere(), 600)
        fine = build_grid(DomainSpec.hemisphere(), 2400)
        assert fine.level == coarse.level + 1
        # every coarse node appears among the fine nodes
        d = coarse.nodes @ fine.nodes.T
        assert np.min(d.max(axis=1)) >= 1.0 - 1e-12

    def test_empty_domain(self):
        with pytest.raises(ValueError):
            build_grid(None, 100)

    def test_resolution_hint(self):
        grid = build_grid(DomainSpec.hemisphere(), 20000)
        assert 0.5 * 20000 <= grid.node_count <= 3 * 20000


class TestIntegrate:
    def test_constant_on_hemisphere(self):
        grid = build_grid(DomainSpec.hemisphere(), 5000)
        assert integrate(grid, lambda x: np.ones(x.shape[0])) == pytest.approx(
            2 * np.pi, rel=1e-3
        )

    def test_cosine_on_hemisphere(self):
        grid = build_grid(DomainSpec.hemisphere(), 5000)
        assert integrate(grid, lambda x: x[:, 2]) == pytest.approx(np.pi, rel=1e-3)

    def test_half_indicator(self):
        grid = build_grid(DomainSpec.hemisphere(), 20000)
        # generic azimuth keeps the cut off the node meridians
        n = np.array([np.cos(0.377), np.sin(0.377), 0.0])
        val = integrate(grid, lambda x: (x @ n >= 0).astype(float))
        assert val == pytest.approx(np.pi, rel=2e-3)

    def test_accepts_value_array(self):
        grid = build_grid(DomainSpec.hemisphere(), 600)
        assert integrate(grid, np.ones(grid.node_count)) == pytest.approx(
            grid.total_weight
        )

    def test_non_finite_rejected(self):
        grid = build_grid(DomainSpec.hemisphere(), 600)
        values = np.ones(grid.node_count)
        values[3] = np.nan
        with pytest.raises(NumericError, match="node 3"):
            integrate(grid, values)


class TestIntensity:
    def test_constant(self):
        grid = build_grid(DomainSpec.hemisphere(), 2000)
        f = IntensityField.constant(2.0, grid)
        assert f.total_flux == pytest.approx(4 * np.pi, rel=1e-3)

    def test_node_table(self):
        grid = build_grid(DomainSpec.hemisphere(), 600)
        f = IntensityField.from_node_values(grid.nodes[:, 2] ** 2, grid)
        assert f.total_flux == pytest.approx(2 * np.pi / 3, rel=2e-3)
        with pytest.raises(ValueError):
            IntensityField.from_node_values(np.ones(3), grid)

    def test_negative_rejected(self):
        grid = build_grid(DomainSpec.hemisphere(), 600)
        with pytest.raises(ValueError):
            IntensityField.constant(-1.0, grid)


class TestTargets:
    def test_discrete(self):
        t = TargetMeasure.discrete([[0, 0, -1], [1, 0, -1]], [1.0, 2.0], 1)
        assert t.total == pytest.approx(3.0)
        assert t.max_op == pytest.approx(np.sqrt(2))
        assert t.min_op == pytest.approx(1.0)
        assert t.diameter == pytest.approx(1.0)

    def test_zero_weight_rejected(self):
        with pytest.raises(ValueError):
            TargetMeasure.discrete([[0, 0, -1], [1, 0, -1]], [1.0, 0.0])

    def test_origin_rejected(self):
        with pytest.raises(ValueError):
            TargetMeasure.discrete([[0.0, 0.0, 0.0]], [1.0])

    def test_directions(self):
        t = TargetMeasure.directions([[0, 0, -1], [1, 0, 0]], [1.0, 1.0])
        assert t.kind == "far-directions"
        with pytest.raises(ValueError):
            TargetMeasure.directions([[0, 0, -2]], [1.0])

    def test_planar_distances(self):
        patch = PlanarPatch(
            np.array([1.0, 0.0, 0.0]),
            np.array([1.0, 0.0, 0.0]),
            np.array([0.0, 1.0, 0.0]),
            (-0.1, 0.1),
            (-0.1, 0.1),
        )
        t = TargetMeasure.planar(patch, lambda u, v: np.ones(np.shape(u)), (0.0, 0.0))
        assert t.min_op == pytest.approx(0.9)
        assert t.max_op == pytest.approx(np.hypot(1.1, 0.1))
        assert t.diameter == pytest.approx(0.2 * np.sqrt(2))
        assert t.total == pytest.approx(0.04, rel=1e-12)


def square_patch(side=1.0):
    return PlanarPatch(
        np.array([0.0, 0.0, -1.0]),
        np.array([1.0, 0.0, 0.0]),
        np.array([0.0, 1.0, 0.0]),
        (0.0, side),
        (0.0, side),
    )


class TestPartition:
    def test_uniform_refine(self):
        t = TargetMeasure.planar(square_patch(), lambda u, v: np.ones(np.shape(u)),
                                 (0.3173, 0.2711), samples_per_axis=128)
        p0 = build_partition(t)
        assert len(p0.cells) == 1
        p1 = refine_partition(p0, t)
        assert len(p1.cells) == 4
        for cell in p1.cells:
            assert cell.mass == pytest.approx(t.total / 4.0, rel=1e-6)

    def test_mass_conserved(self):
        bump = lambda u, v: np.exp(-((u - 0.6) ** 2 + (v - 0.3) ** 2) / 0.02)  # noqa: E731
        t = TargetMeasure.planar(square_patch(), bump, (0.6012, 0.3017),
                                 samples_per_axis=256)
        p = build_partition(t)
        for _ in range(3):
            p = refine_partition(p, t)
            assert p.total_mass == pytest.approx(t.total, rel=1e-9)

    def test_max_diameter_halves(self):
        t = TargetMeasure.planar(square_patch(), lambda u, v: np.ones(np.shape(u)),
                                 (0.3173, 0.2711), samples_per_axis=64)
        p = build_partition(t, eps0=np.sqrt(2.0))
        for level in range(1, 4):
            p = refine_partition(p, t)
            assert p.max_diameter <= np.sqrt(2.0) / 2**level * (1 + 1e-9)

    def test_gaussian_masses_match_fine_quadrature(self):
        sig2 = 0.08
        bump = lambda u, v: np.exp(-((u - 0.45) ** 2 + (v - 0.55) ** 2) / sig2)  # noqa: E731
        t = TargetMeasure.planar(square_patch(), bump, (0.451, 0.552),
                                 samples_per_axis=512)
        p = refine_partition(refine_partition(build_partition(t), t), t)
        for cell in p.cells:
            ref, _ = dblquad(
                lambda v, u: float(bump(np.array([u]), np.array([v]))[0]),
                cell.u0, cell.u1, cell.v0, cell.v1,
                epsabs=1e-12, epsrel=1e-10,
            )
            assert cell.mass == pytest.approx(ref, rel=1e-4)

    def test_representatives_inside_and_overshoot_kept(self):
        t = TargetMeasure.planar(square_patch(), lambda u, v: np.ones(np.shape(u)),
                                 (0.3173, 0.2711), samples_per_axis=64)
        p = build_partition(t)
        for level in range(4):
            over = [c for c in p.cells if c.is_overshoot]
            assert len(over) == 1
            assert np.allclose(over[0].rep_uv, (0.3173, 0.2711))
            # the overshoot point is interior to its cell
            assert over[0].u0 < 0.3173 < over[0].u1
            assert over[0].v0 < 0.2711 < over[0].v1
            for cell in p.cells:
                assert cell.contains_uv(cell.rep_uv)
                assert cell.mass > 0.0
            p = refine_partition(p, t)

    def test_zero_density_cells_dropped(self):
        half = lambda u, v: np.where(np.asarray(u) < 0.5, 1.0, 0.0)  # noqa: E731
        t = TargetMeasure.planar(square_patch(), half, (0.101, 0.1202),
                                 samples_per_axis=128)
        p = refine_partition(build_partition(t), t)
        assert len(p.cells) == 2  # right-half cells carry no mass
        assert p.total_mass == pytest.approx(t.total, rel=1e-12)

    def test_representative_snaps_to_support(self):
        # mass only in a corner: the full-cell centroid has zero density
        corner = lambda u, v: np.where((np.asarray(u) > 0.8) & (np.asarray(v) > 0.8), 1.0, 0.0)  # noqa: E731
        t = TargetMeasure.planar(square_patch(), corner, (0.901, 0.902),
                                 samples_per_axis=128)
        p = build_partition(t)
        assert len(p.cells) == 1
        cell = p.cells[0]
        assert cell.rep_uv[0] > 0.8 and cell.rep_uv[1] > 0.8
