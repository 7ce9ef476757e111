import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meshsplat.core import Camera, project_point, world_to_camera
from meshsplat.mesh import MeshBvh, TriMesh
from meshsplat.scenes import cube_mesh
from meshsplat.splats import (LOWPASS, SplatSet, build_covariance, classify_splats, gaussian_weight,
                              init_from_mesh, project_splat, project_splats, splat_normals)

from conftest import random_splats


def axis_camera(f=50.0, size=64):
    return Camera(f, f, size / 2, size / 2, size, size, np.eye(3), np.zeros(3))


class TestCovariance:
    def test_identity(self):
        np.testing.assert_array_equal(build_covariance([0, 0, 0], [1, 0, 0, 0]), np.eye(3))

    def test_axis_aligned(self):
        np.testing.assert_allclose(build_covariance([np.log(2), 0, 0], [1, 0, 0, 0]), np.diag([4, 1, 1]),
                                   atol=1e-15)

    def test_eigenvalues_match_scales(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            raw = rng.uniform(-3, 1, 3)
            S = build_covariance(raw, rng.normal(size=4))
            np.testing.assert_allclose(S, S.T, atol=0)
            np.testing.assert_allclose(np.linalg.eigvalsh(S), np.sort(np.exp(raw) ** 2), rtol=1e-9, atol=1e-12)

    def test_psd_batch(self):
        rng = np.random.default_rng(1)
        raw = rng.uniform(-2, 1, (100000, 3))
        S = build_covariance(raw, rng.normal(size=(100000, 4)))
        np.linalg.cholesky(S)


class TestProjection:
    def test_on_axis_isotropic(self):
        f, sigma, z = 50.0, 0.05, 2.0
        s = SplatSet.create([[0, 0, z]], sigma, 0.9)
        p = project_splat(s, 0, axis_camera(f))
        expect = (f * sigma / z) ** 2 + LOWPASS
        np.testing.assert_allclose(p.cov, np.diag([expect, expect]), atol=1e-6)
        np.testing.assert_allclose(p.mean, [32, 32])

    def test_depth_doubling_halves_sigma(self):
        cov = []
        for z in (2.0, 4.0):
            p = project_splat(SplatSet.create([[0.1, 0, z]], 0.05, 0.9), 0, axis_camera())
            cov.append(p.cov[0, 0] - LOWPASS)
        assert np.sqrt(cov[1]) == pytest.approx(np.sqrt(cov[0]) / 2, rel=0.02)
        on_axis = [project_splat(SplatSet.create([[0, 0, z]], 0.05, 0.9), 0, axis_camera()).cov[0, 0] - LOWPASS
                   for z in (2.0, 4.0)]
        assert np.sqrt(on_axis[1]) == pytest.approx(np.sqrt(on_axis[0]) / 2, rel=1e-12)

    def test_matches_fd_jacobian(self):
        rng = np.random.default_rng(2)
        cam = Camera.look_at([0.4, -0.3, -3], [0, 0, 0], [0, -1, 0], 60, 55, 64, 64)
        s = random_splats(rng, 20, spread=0.5)
        proj = project_splats(s, cam)
        h = 1e-6
        for i in range(20):
            pc = world_to_camera(cam, s.positions[i])
            J = np.zeros((2, 3))
            for k in range(3):
                e = np.zeros(3)
                e[k] = h
                J[:, k] = (np.array(project_point(cam, pc + e)[:2]) - np.array(project_point(cam, pc - e)[:2])) / (2 * h)
            Sc = cam.R_cw @ build_covariance(s.raw_scales[i], s.rotations[i]) @ cam.R_cw.T
            expect = J @ Sc @ J.T + LOWPASS * np.eye(2)
            np.testing.assert_allclose(proj.cov2d[i], expect, rtol=1e-4)

    def test_depth_is_camera_z(self):
        rng = np.random.default_rng(3)
        cam = Camera.look_at([0.4, -0.3, -3], [0, 0, 0], [0, -1, 0], 60, 55, 64, 64)
        s = random_splats(rng, 30)
        proj = project_splats(s, cam)
        for i in range(30):
            assert proj.depths[i] == world_to_camera(cam, s.positions[i])[2]

    def test_dilated_covariance_positive_definite(self):
        rng = np.random.default_rng(4)
        s = random_splats(rng, 200)
        s.raw_scales[:] = rng.uniform(-12, -4, (200, 3))
        proj = project_splats(s, Camera.look_at([0, 0, -3], [0, 0, 0], [0, -1, 0], 60, 60, 64, 64))
        ev = np.linalg.eigvalsh(proj.cov2d)
        assert (ev >= LOWPASS * (1 - 1e-12)).all()

    def test_culling(self):
        cam = axis_camera()
        assert project_splat(SplatSet.create([[0, 0, -1]], 0.05, 0.9), 0, cam) is None
        assert project_splat(SplatSet.create([[50, 0, 1]], 0.05, 0.9), 0, cam) is None


class TestGaussianWeight:
    def test_peak_and_unit_mahalanobis(self):
        cov = np.array([[4.0, 1.0], [1.0, 2.0]])
        mean = np.array([3.0, 1.0])
        assert gaussian_weight(mean, cov, mean) == 1.0
        L = np.linalg.cholesky(cov)
        x = mean + L @ np.array([np.sqrt(2), 0])
        assert gaussian_weight(mean, cov, x) == pytest.approx(np.exp(-1), rel=1e-12)

    def test_matches_solve(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            A = rng.normal(size=(2, 2))
            cov = A @ A.T + 0.3 * np.eye(2)
            mean, x = rng.normal(size=2), rng.normal(size=2)
            d = x - mean
            expect = np.exp(-0.5 * d @ np.linalg.solve(cov, d))
            assert gaussian_weight(mean, cov, x) == pytest.approx(expect, rel=1e-12, abs=1e-300)


class TestClassification:
    def setup_method(self):
        self.mesh = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        self.bvh = MeshBvh(self.mesh)

    def _classify(self, pos, d_th=0.01):
        s = SplatSet.create(pos, 0.01, 0.5)
        d = classify_splats(s, self.mesh, self.bvh, d_th)
        return s, d

    def test_centroid_is_tight(self):
        s, d = self._classify([[1 / 3, 1 / 3, 0]])
        assert s.tight[0] and d[0] < 1e-15 and s.bound_face[0] == 0

    def test_far_is_loose(self):
        s, d = self._classify([[0.25, 0.25, 0.5]])
        assert not s.tight[0] and d[0] == pytest.approx(0.5)

    def test_threshold_is_strict(self):
        s, d = self._classify([[0.25, 0.25, 0.25]], d_th=0.25)
        assert d[0] == 0.25 and not s.tight[0]

    def test_partition(self):
        rng = np.random.default_rng(6)
        mesh = cube_mesh()
        s = SplatSet.create(rng.uniform(-0.7, 0.7, (500, 3)), 0.01, 0.5)
        d = classify_splats(s, mesh, MeshBvh(mesh), 0.05)
        np.testing.assert_array_equal(s.tight, d < 0.05)
        assert (s.bound_face >= 0).all()


class TestInitFromMesh:
    def test_cube(self):
        V = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
        F = [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
             [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
        mesh = TriMesh(V, F)
        s = init_from_mesh(mesh)
        assert len(s) == 12
        np.testing.assert_allclose(s.positions, mesh.centroids(), atol=1e-15)
        n, _ = splat_normals(s)
        np.testing.assert_allclose(np.abs(np.sum(n * mesh.normals, axis=1)), 1, atol=1e-6)
        np.testing.assert_allclose(s.opacities, 0.1)
        d = classify_splats(s, mesh, MeshBvh(mesh), 0.01)
        assert s.tight.all() and np.all(d < 1e-15)
        np.testing.assert_array_equal(s.bound_face, np.arange(12))

    def test_initial_colour_is_gray(self):
        s = init_from_mesh(cube_mesh(cells=1), sh_degree=2)
        cam = Camera.look_at([0, 0, -3], [0, 0, 0], [0, -1, 0], 60, 60, 32, 32)
        np.testing.assert_allclose(project_splats(s, cam).colors, 0.5, atol=1e-15)

    def test_empty_mesh(self):
        with pytest.raises(ValueError):
            init_from_mesh(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int)))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 0), min_size=3, max_size=3), st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_normal_invariant_to_permuting_other_axes(raw, q):
    q = np.array(q)
    if np.linalg.norm(q) < 1e-3 or len(set(raw)) < 3:
        return
    raw = np.array(raw)
    k = int(np.argmin(raw))
    others = [i for i in range(3) if i != k]
    swapped = raw.copy()
    swapped[others] = raw[others[::-1]]
    a = SplatSet.create(np.zeros((1, 3)), np.exp(raw), 0.5, rotations=q[None])
    b = SplatSet.create(np.zeros((1, 3)), np.exp(swapped), 0.5, rotations=q[None])
    np.testing.assert_array_equal(splat_normals(a)[0], splat_normals(b)[0])
