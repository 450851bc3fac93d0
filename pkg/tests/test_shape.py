"""Shape reconstruction tests.

Oracles: ground-truth voxel occupancy comes from direct point-in-cuboid
arithmetic; the regularized fit is checked against scipy's numerical
minimizer of the same objective; mesh volume against the analytic cuboid
volume.
"""

from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import minimize

from carom.errors import (
    DimensionMismatch,
    EmptyGrid,
    EmptyHull,
    TooFewModels,
    UnknownType,
)
from carom.geom import box_corners, convex_hull
from carom.shape import (
    HeightHistogram,
    ShapePrior,
    ShapeView,
    VoxelGrid,
    build_default_prior,
    build_prior,
    carve,
    default_model_library,
    fit_shape,
    histogram_to_voxels,
    init_grid,
    mesh_from_voxels,
    resample,
    symmetrize,
    template_for,
    voxels_to_histogram,
)

from conftest import camera_from_matrix, make_projection


DIMS = (4.2, 1.8, 1.5)


def _ring_views(dims, center=(0.0, 0.0, 0.0), n=4, dist=25.0, height=10.0):
    """Cameras on a ring looking at the vehicle, exact silhouettes."""
    views = []
    for k in range(n):
        ang = 2 * np.pi * k / n + 0.4
        pos = (center[0] + dist * np.cos(ang), center[1] + dist * np.sin(ang), height)
        yaw = np.degrees(ang + np.pi)
        pitch = np.degrees(np.arctan2(height, dist))
        cam = camera_from_matrix(make_projection(pos, yaw, pitch))
        corners = box_corners(np.asarray(center, dtype=float), 0.0, dims)
        sil = convex_hull(cam.project(corners))
        views.append(ShapeView(mask=sil, camera=cam,
                               center_bottom=np.asarray(center, dtype=float),
                               heading=0.0))
    return views


def _truth_occupancy(grid: VoxelGrid, dims):
    """Oracle: voxel centers inside the cuboid, by direct arithmetic."""
    length, width, height = dims
    nx, ny, nz = grid.occupancy.shape
    idx = np.argwhere(np.ones((nx, ny, nz), dtype=bool))
    centers = grid._centers_for(idx)
    inside = ((np.abs(centers[:, 0]) <= length / 2)
              & (np.abs(centers[:, 1]) <= width / 2)
              & (centers[:, 2] >= 0) & (centers[:, 2] <= height))
    occ = np.zeros((nx, ny, nz), dtype=bool)
    occ[idx[inside, 0], idx[inside, 1], idx[inside, 2]] = True
    return occ


class TestCarve:
    def test_four_view_iou(self):
        views = _ring_views(DIMS)
        grid = carve(views, DIMS, voxel_size=0.1)
        truth = _truth_occupancy(grid, DIMS)
        inter = (grid.occupancy & truth).sum()
        union = (grid.occupancy | truth).sum()
        assert inter / union >= 0.9

    def test_superset_property_single_view(self):
        views = _ring_views(DIMS, n=1)
        grid = carve(views, DIMS, voxel_size=0.1)
        truth = _truth_occupancy(grid, DIMS)
        # every truth voxel survives carving from exact silhouettes
        assert not (truth & ~grid.occupancy).any()

    def test_superset_property_four_views(self):
        views = _ring_views(DIMS)
        grid = carve(views, DIMS, voxel_size=0.1)
        truth = _truth_occupancy(grid, DIMS)
        assert not (truth & ~grid.occupancy).any()

    def test_monotonicity_adding_views(self):
        views = _ring_views(DIMS, n=6)
        prev = None
        for k in (1, 2, 4, 6):
            grid = carve(views[:k], DIMS, voxel_size=0.15)
            if prev is not None:
                assert not (grid.occupancy & ~prev).any()  # never adds voxels
            prev = grid.occupancy

    def test_inconsistent_masks_empty_hull(self):
        views = _ring_views(DIMS, n=2)
        # point the second view's silhouette somewhere else entirely
        views[1] = ShapeView(mask=views[1].mask + 4000.0, camera=views[1].camera,
                             center_bottom=views[1].center_bottom, heading=0.0)
        with pytest.raises(EmptyHull):
            carve(views, DIMS, voxel_size=0.2)


class TestSymmetrize:
    def test_symmetric_fixed_point(self):
        grid = init_grid(DIMS, 0.2)
        assert np.array_equal(symmetrize(grid).occupancy, grid.occupancy)

    def test_one_sided_voxel_removed(self):
        grid = init_grid((1.0, 1.0, 1.0), 0.25)
        grid.occupancy[:] = False
        grid.occupancy[1, 3, 1] = True  # +y side only
        out = symmetrize(grid)
        assert not out.occupancy.any()

    def test_idempotent(self):
        rng = np.random.default_rng(4)
        grid = init_grid(DIMS, 0.2)
        grid.occupancy = rng.uniform(size=grid.occupancy.shape) > 0.4
        once = symmetrize(grid)
        twice = symmetrize(once)
        assert np.array_equal(once.occupancy, twice.occupancy)


class TestHistogram:
    def test_full_cuboid_bins(self):
        grid = init_grid((1.0, 1.0, 1.5), 0.1)
        hist = voxels_to_histogram(grid)
        assert np.allclose(hist.values, 1.5)

    def test_round_trip_within_one_voxel(self):
        rng = np.random.default_rng(7)
        grid = init_grid(DIMS, 0.1)
        # random terrain-like occupancy: fill columns to random heights
        nz = grid.occupancy.shape[2]
        tops = rng.integers(1, nz + 1, size=grid.occupancy.shape[:2])
        grid.occupancy = (np.arange(nz)[None, None, :] < tops[:, :, None])
        hist = voxels_to_histogram(grid)
        back = histogram_to_voxels(hist, 0.1)
        hist2 = voxels_to_histogram(back)
        assert np.abs(hist2.values - hist.values).max() <= 0.1 + 1e-9

    def test_stepped_block(self):
        grid = init_grid((2.0, 1.0, 1.0), 0.25)
        nx = grid.occupancy.shape[0]
        grid.occupancy[: nx // 2, :, 2:] = False  # front half lower
        hist = voxels_to_histogram(grid)
        assert np.allclose(hist.values[: nx // 2], 0.5)
        assert np.allclose(hist.values[nx // 2:], 1.0)

    def test_empty_grid(self):
        grid = init_grid(DIMS, 0.1)
        grid.occupancy[:] = False
        with pytest.raises(EmptyGrid):
            voxels_to_histogram(grid)


class TestResample:
    def test_constant_preserved(self):
        hist = HeightHistogram(values=np.full((30, 17), 1.3), dims=DIMS)
        out = resample(hist, 50, 50)
        assert out.values.shape == (50, 50)
        assert np.allclose(out.values, 1.3)

    def test_affine_field_exact(self):
        x = np.linspace(0, 2, 40)[:, None]
        y = np.linspace(0, 1, 25)[None, :]
        hist = HeightHistogram(values=0.3 + 0.5 * x + 0.2 * y, dims=DIMS)
        out = resample(hist, 50, 50)
        xo = np.linspace(0, 2, 50)[:, None]
        yo = np.linspace(0, 1, 50)[None, :]
        assert np.allclose(out.values, 0.3 + 0.5 * xo + 0.2 * yo, atol=1e-12)

    def test_bounds_within_source(self):
        rng = np.random.default_rng(11)
        vals = rng.uniform(0, 2, (100, 80))
        out = resample(HeightHistogram(values=vals, dims=DIMS), 50, 50)
        assert out.values.min() >= vals.min() - 1e-12
        assert out.values.max() <= vals.max() + 1e-12


class TestPrior:
    def test_basis_shape_and_orthonormality(self):
        prior = build_default_prior()
        assert prior.model_vectors.shape[0] >= 80
        assert prior.basis.shape == (2500, 20)
        gram = prior.basis.T @ prior.basis
        assert np.allclose(gram, np.eye(20), atol=1e-9)
        assert not prior.rank_deficient

    def test_identical_inputs_flagged(self):
        hists = [np.full((50, 50), 1.0)] * 25
        prior = build_prior(hists, ["sedan"] * 25)
        assert prior.rank_deficient

    def test_too_few_models(self):
        hists, types = default_model_library(n_models=80)
        with pytest.raises(TooFewModels):
            build_prior(hists[:10], types[:10])

    def test_reconstruction_monotone_in_components(self):
        hists, types = default_model_library()
        prior = build_prior(hists, types)
        u = prior.model_vectors[3] - prior.mean
        res = []
        for k in (19, 20):
            s = prior.basis[:, :k]
            res.append(np.linalg.norm(u - s @ (s.T @ u)))
        assert res[1] <= res[0] + 1e-12

    def test_prior_file_round_trip(self, tmp_path):
        prior = build_default_prior()
        path = tmp_path / "prior.npz"
        prior.save(path)
        back = ShapePrior.load(path)
        assert np.allclose(back.basis, prior.basis)
        assert np.allclose(back.mean, prior.mean)
        assert set(back.templates) == set(prior.templates)
        for k in prior.templates:
            assert np.allclose(back.templates[k], prior.templates[k])


@pytest.fixture(scope="module")
def prior():
    return build_default_prior()


class TestFitShape:
    def _objective(self, prior, h, t, lam):
        def f(v):
            r = (h - prior.mean) - prior.basis @ v
            return r @ r + lam * ((v - t) @ (v - t))

        def grad(v):
            r = (h - prior.mean) - prior.basis @ v
            return -2.0 * prior.basis.T @ r + 2.0 * lam * (v - t)

        return f, grad

    def test_lambda_zero_projection_exact(self, prior):
        rng = np.random.default_rng(0)
        c = rng.normal(0, 0.3, 20)
        h = prior.mean + prior.basis @ c
        vec = fit_shape(h, prior, "sedan", lam=0.0)
        assert np.linalg.norm(prior.basis @ vec.coefficients - (h - prior.mean)) < 1e-9

    def test_lambda_huge_returns_template(self, prior):
        rng = np.random.default_rng(1)
        h = np.abs(rng.normal(1.0, 0.3, 2500))
        vec = fit_shape(h, prior, "sedan", lam=1e9)
        t = template_for("sedan", prior).coefficients
        assert np.abs(vec.coefficients - t).max() < 1e-6

    @pytest.mark.parametrize("lam", [0.0, 0.1, 1.0])
    def test_matches_numerical_minimizer(self, prior, lam):
        rng = np.random.default_rng(42)
        h = np.abs(rng.normal(1.0, 0.4, 2500))
        t = template_for("sedan", prior).coefficients
        vec = fit_shape(h, prior, "sedan", lam=lam)
        f, grad = self._objective(prior, h, t, lam)
        res = minimize(f, x0=t, jac=grad, method="BFGS",
                       options={"gtol": 1e-10, "maxiter": 2000})
        assert np.abs(vec.coefficients - res.x).max() < 1e-6

    def test_fit_optimality_against_perturbations(self, prior):
        rng = np.random.default_rng(3)
        h = np.abs(rng.normal(1.0, 0.4, 2500))
        t = template_for("SUV", prior).coefficients
        vec = fit_shape(h, prior, "SUV", lam=0.1)
        f, _ = self._objective(prior, h, t, 0.1)
        base = f(vec.coefficients)
        for _ in range(1000):
            delta = rng.normal(0, 1, 20)
            delta *= 1e-3 / np.linalg.norm(delta)
            assert f(vec.coefficients + delta) >= base - 1e-12

    def test_dimension_mismatch(self, prior):
        with pytest.raises(DimensionMismatch):
            fit_shape(np.zeros(100), prior, "sedan")

    def test_template_provenance(self, prior):
        vec = template_for("bus", prior)
        assert vec.provenance == "template"
        with pytest.raises(UnknownType):
            template_for("hovercraft", prior)

    def test_single_model_type_template(self):
        hists, types = default_model_library()
        # add a type with exactly one model
        one = hists[0] * 0.5
        prior = build_prior(hists + [one], types + ["trailer-special"])
        t = template_for("trailer-special", prior)
        want = prior.basis.T @ (one.ravel() - prior.mean)
        assert np.allclose(t.coefficients, want)


class TestMesh:
    def test_single_voxel_closed_surface(self):
        grid = init_grid((0.1, 0.1, 0.1), 0.1)
        mesh = mesh_from_voxels(grid)
        # single-voxel marching cubes yields an octahedron: chi = V - E + F = 2
        assert mesh.euler_characteristic() == 2

    def test_cuboid_volume_within_five_percent(self):
        grid = init_grid((2.0, 1.0, 1.0), 0.1)
        mesh = mesh_from_voxels(grid)
        nx, ny, nz = grid.occupancy.shape
        expected = nx * ny * nz * 0.1 ** 3
        assert abs(mesh.volume() - expected) / expected < 0.05

    def test_empty_grid(self):
        grid = init_grid(DIMS, 0.1)
        grid.occupancy[:] = False
        with pytest.raises(EmptyGrid):
            mesh_from_voxels(grid)

    def test_obj_export(self, tmp_path):
        grid = init_grid((0.5, 0.5, 0.5), 0.25)
        mesh = mesh_from_voxels(grid)
        path = tmp_path / "vehicle.obj"
        mesh.save_obj(path)
        text = path.read_text()
        assert text.count("v ") == len(mesh.vertices)
        assert text.count("f ") == len(mesh.faces)


class TestSymmetryHistogramCommute:
    def test_commutes_for_symmetric_grids(self):
        rng = np.random.default_rng(9)
        grid = init_grid(DIMS, 0.2)
        occ = rng.uniform(size=grid.occupancy.shape) > 0.3
        grid.occupancy = occ & occ[:, ::-1, :]  # make symmetric
        if not grid.occupancy.any():
            grid.occupancy[0, 0, 0] = grid.occupancy[0, -1, 0] = True
        h_then_s = voxels_to_histogram(symmetrize(grid)).values
        s_then_h = voxels_to_histogram(grid).values  # already symmetric
        assert np.allclose(h_then_s, s_then_h)
