import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meshsplat.core import Camera
from meshsplat.mesh import (EDGE, INTERIOR, VERTEX, MeshBvh, MeshError, TriMesh, closest_point_on_triangle,
                            closest_points_on_triangles, decimate_qem, face_centroid, load_mesh, nearest_face,
                            nearest_face_linear, point_to_mesh_distance, render_depth, save_mesh)
from meshsplat.scenes import cube_mesh, icosphere_mesh


def dense_oracle(p, tri, n=300):
    """Best point of a barycentric grid, refined by projected gradient descent on the simplex."""
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    mask = i + j <= n
    w = np.stack([i[mask], j[mask]], axis=1) / n
    pts = tri[0] + w[:, :1] * (tri[1] - tri[0]) + w[:, 1:] * (tri[2] - tri[0])
    k = np.argmin(np.linalg.norm(pts - p, axis=1))
    uv = w[k].copy()
    E = np.stack([tri[1] - tri[0], tri[2] - tri[0]], axis=1)
    H = E.T @ E
    step = 1.0 / np.linalg.eigvalsh(H).max()
    for _ in range(20000):
        g = E.T @ (tri[0] + E @ uv - p)
        uv = uv - step * g
        uv = np.maximum(uv, 0)
        if uv.sum() > 1:
            # project onto the hypotenuse segment
            t = (uv[0] - uv[1] + 1) / 2
            uv = np.array([np.clip(t, 0, 1), 1 - np.clip(t, 0, 1)])
    return np.linalg.norm(tri[0] + E @ uv - p)


def feature_oracle(p, tri):
    """Minimum over the plane projection (when inside) and the three clamped edge projections."""
    a, b, c = tri
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    q = p - np.dot(p - a, n) * n
    best = np.inf
    M = np.stack([b - a, c - a], axis=1)
    uv = np.linalg.lstsq(M, q - a, rcond=None)[0]
    if uv.min() >= 0 and uv.sum() <= 1:
        best = abs(np.dot(p - a, n))
    for s, e in ((a, b), (b, c), (c, a)):
        t = np.clip(np.dot(p - s, e - s) / np.dot(e - s, e - s), 0, 1)
        best = min(best, np.linalg.norm(s + t * (e - s) - p))
    return best


class TestTriMesh:
    def test_normals_and_centroid(self):
        m = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        np.testing.assert_array_equal(m.normals[0], [0, 0, 1])
        np.testing.assert_allclose(face_centroid(m, 0), [1 / 3, 1 / 3, 0])

    def test_rejects_bad_index(self):
        with pytest.raises(MeshError):
            TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])

    def test_rejects_degenerate(self):
        with pytest.raises(MeshError):
            TriMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])

    def test_from_arrays_drops_degenerate(self):
        m = TriMesh.from_arrays([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], [[0, 1, 2], [0, 1, 3]])
        assert m.n_faces == 1 and m.dropped_faces == 1

    @pytest.mark.parametrize("suffix,ascii", [(".obj", False), (".ply", False), (".ply", True)])
    def test_io_roundtrip(self, tmp_path, suffix, ascii):
        m = icosphere_mesh(subdivisions=1)
        path = tmp_path / f"m{suffix}"
        save_mesh(m, path, ascii=ascii)
        back = load_mesh(path)
        np.testing.assert_array_equal(back.faces, m.faces)
        np.testing.assert_array_equal(back.vertices, m.vertices)

    def test_obj_polygons_and_negative_indices(self, tmp_path):
        path = tmp_path / "quad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf -4 -3 -2 -1\nf 1/1/1 2/2/2 4/4/4\n")
        m = load_mesh(path)
        np.testing.assert_array_equal(m.faces, [[0, 1, 2], [0, 2, 3], [0, 1, 3]])

    def test_unknown_format(self, tmp_path):
        with pytest.raises(MeshError):
            load_mesh(tmp_path / "mesh.stl")


class TestClosestPoint:
    TRI = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])

    @pytest.mark.parametrize("p,region,d", [
        ([0.2, 0.2, 0.5], "interior", 0.5),
        ([0.5, -1.0, 0.0], "edge", 1.0),
        ([-1.0, -1.0, 0.0], "vertex", np.sqrt(2)),
        ([2.0, 2.0, 0.0], "edge", np.sqrt(4.5)),
    ])
    def test_regions(self, p, region, d):
        q, dist, name = closest_point_on_triangle(np.array(p), self.TRI)
        assert name == region
        assert dist == pytest.approx(d, abs=1e-12)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            tri = rng.normal(size=(3, 3))
            p = rng.normal(scale=1.5, size=3)
            _, d, _ = closest_point_on_triangle(p, tri)
            assert abs(d - dense_oracle(p, tri)) < 1e-6

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=12, max_size=12))
    def test_matches_feature_oracle(self, vals):
        v = np.array(vals).reshape(4, 3)
        tri, p = v[:3], v[3]
        if np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0])) < 1e-3:
            return
        q, d, _ = closest_point_on_triangle(p, tri)
        assert d == pytest.approx(feature_oracle(p, tri), abs=1e-9)
        assert np.linalg.norm(q - p) == pytest.approx(d, abs=1e-12)

    def test_vectorized_region_codes(self):
        tri = np.broadcast_to(self.TRI, (3, 3, 3))
        p = np.array([[0.2, 0.2, 1.0], [0.5, -1, 0], [-1, -1, 0]])
        _, _, r = closest_points_on_triangles(p, tri[:, 0], tri[:, 1], tri[:, 2])
        np.testing.assert_array_equal(r, [INTERIOR, EDGE, VERTEX])


class TestBvh:
    @pytest.mark.parametrize("mesh", [icosphere_mesh(subdivisions=3), cube_mesh(cells=6)], ids=["sphere", "cube"])
    def test_equals_linear_scan(self, mesh):
        rng = np.random.default_rng(1)
        bvh = MeshBvh(mesh)
        pts = rng.uniform(-1.5, 1.5, (2000, 3))
        for p in pts:
            f, d = nearest_face(bvh, p)
            fl, dl = nearest_face_linear(mesh, p)
            assert f == fl and d == dl

    def test_tie_breaks_to_lowest_face(self):
        mesh = cube_mesh(cells=2)
        bvh = MeshBvh(mesh)
        # a cube corner is shared by several faces at distance zero
        f, d = nearest_face(bvh, np.array([0.5, 0.5, 0.5]))
        fl, _ = nearest_face_linear(mesh, np.array([0.5, 0.5, 0.5]))
        assert d == 0.0 and f == fl

    def test_nearest_many_and_distance(self):
        mesh = icosphere_mesh(subdivisions=2)
        pts = np.random.default_rng(2).normal(size=(100, 3))
        ids, d = MeshBvh(mesh).nearest_many(pts)
        np.testing.assert_array_equal(d, point_to_mesh_distance(mesh, pts))
        assert ids.dtype.kind == "i" and (ids >= 0).all()

    def test_leaves_partition_faces(self):
        mesh = icosphere_mesh(subdivisions=2)
        bvh = MeshBvh(mesh)
        leaves = bvh.leaves()
        allf = np.sort(np.concatenate([bvh.order[s:s + c] for s, c in leaves]))
        np.testing.assert_array_equal(allf, np.arange(mesh.n_faces))


def plane_grid(n, slope=(0.3, 0.2)):
    xs = np.linspace(0, 1, n + 1)
    V = np.array([[x, y, slope[0] * x + slope[1] * y] for y in xs for x in xs])
    F = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            F += [(a, a + 1, a + n + 2), (a, a + n + 2, a + n + 1)]
    return TriMesh(V, F)


def surface_samples(mesh, per_face=30, seed=0):
    rng = np.random.default_rng(seed)
    u, v = rng.random((2, mesh.n_faces, per_face))
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    t = mesh.triangles()
    return (t[:, None, 0] + u[..., None] * (t[:, None, 1] - t[:, None, 0])
            + v[..., None] * (t[:, None, 2] - t[:, None, 0])).reshape(-1, 3)


class TestDecimation:
    def test_coplanar_grid(self):
        m = plane_grid(10)
        out = decimate_qem(m, 8)
        assert out.n_faces <= 8
        err = max(point_to_mesh_distance(out, surface_samples(m)).max(),
                  point_to_mesh_distance(m, surface_samples(out)).max())
        assert err < 1e-9
        assert out.areas().sum() == pytest.approx(m.areas().sum(), abs=1e-12)

    def test_sphere_reduces_and_stays_close(self):
        m = icosphere_mesh(subdivisions=3)
        out = decimate_qem(m, 200)
        assert out.n_faces <= 200
        assert point_to_mesh_distance(out, surface_samples(m, 5)).max() < 0.05
        assert (np.einsum("ij,ij->i", out.normals, out.centroids()) > 0).all()

    def test_noop_when_small(self):
        m = plane_grid(2)
        assert decimate_qem(m, 100) is m

    def test_rejects_tiny_target(self):
        with pytest.raises(ValueError):
            decimate_qem(plane_grid(3), 2)


def raycast_depth(mesh, cam):
    """Brute-force per-pixel Moller-Trumbore in camera space (ray z component is 1)."""
    tri = mesh.triangles() @ cam.R_cw.T + cam.t_cw
    H, W = cam.height, cam.width
    out = np.full((H, W), np.inf)
    margin = np.full((H, W), np.inf)
    a, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    for i in range(H):
        for j in range(W):
            d = np.array([(j + 0.5 - cam.cx) / cam.fx, (i + 0.5 - cam.cy) / cam.fy, 1.0])
            pv = np.cross(d, e2)
            det = np.einsum("ij,ij->i", e1, pv)
            ok = np.abs(det) > 1e-14
            inv = np.where(ok, 1 / np.where(ok, det, 1), 0)
            s = -a
            u = np.einsum("ij,ij->i", s, pv) * inv
            qv = np.cross(s, e1)
            v = (qv @ d) * inv
            t = np.einsum("ij,ij->i", e2, qv) * inv
            hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0.01)
            if hit.any():
                k = np.argmin(np.where(hit, t, np.inf))
                out[i, j] = t[k]
                margin[i, j] = min(u[k], v[k], 1 - u[k] - v[k])
    return out, margin


class TestDepth:
    @pytest.mark.parametrize("mesh", [cube_mesh(), icosphere_mesh(subdivisions=2)], ids=["cube", "sphere"])
    def test_matches_raycast(self, mesh):
        cam = Camera.look_at([2.0, 1.3, 1.1], [0, 0, 0], [0, 0, 1], 40, 40, 32, 32)
        D = render_depth(mesh, cam)
        R, margin = raycast_depth(mesh, cam)
        clear = (margin > 1e-6) | ~np.isfinite(R)
        both = np.isfinite(D) & np.isfinite(R) & clear
        assert both.sum() > 100
        np.testing.assert_allclose(D[both], R[both], rtol=1e-10)
        np.testing.assert_array_equal(np.isfinite(D)[clear], np.isfinite(R)[clear])

    def test_empty_view_is_inf(self):
        cam = Camera.look_at([0, 0, 5], [0, 0, 10], [0, 1, 0], 40, 40, 16, 16)
        assert np.isinf(render_depth(cube_mesh(), cam)).all()

    def test_camera_inside_clips_near_plane(self):
        cam = Camera(20, 20, 8, 8, 16, 16, np.eye(3), np.zeros(3))
        D = render_depth(cube_mesh(side=2.0), cam)
        # looking down +z from the center hits the far face at z = 1
        assert D[8, 8] == pytest.approx(1.0)
        assert np.isfinite(D).all()
