import math

import numpy as np
import pytest

from meshsplat.core import quat_to_rotmat, rotmat_to_quat
from meshsplat.mesh import TriMesh, closest_point_on_triangle
from meshsplat.losses import (LossWeights, image_loss, l1_loss, normal_consistency_loss, projection_loss, psnr,
                              scale_loss, ssim, ssim_grad, total_loss)
from meshsplat.scenes import cube_mesh
from meshsplat.splats import SplatSet


def direct_ssim(x, y, size=11, sigma=1.5):
    """Per-pixel windowed SSIM with an explicit 2D Gaussian and zero padding."""
    r = size // 2
    g = np.exp(-(np.arange(-r, r + 1) ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    H, W, C = x.shape
    px = np.pad(x, ((r, r), (r, r), (0, 0)))
    py = np.pad(y, ((r, r), (r, r), (0, 0)))
    vals = []
    for c in range(C):
        for i in range(H):
            for j in range(W):
                a = px[i:i + size, j:j + size, c]
                b = py[i:i + size, j:j + size, c]
                mx, my = (w * a).sum(), (w * b).sum()
                vx = (w * a * a).sum() - mx * mx
                vy = (w * b * b).sum() - my * my
                cxy = (w * a * b).sum() - mx * my
                vals.append((2 * mx * my + 1e-4) * (2 * cxy + 9e-4) / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4)))
    return float(np.mean(vals))


def tri_mesh():
    return TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])


def tight(pos, scales=(0.05, 0.05, 0.001), rotations=None, face=0):
    n = len(pos)
    return SplatSet.create(pos, scales, 0.5, rotations=rotations, bound_face=np.full(n, face),
                           tight=np.ones(n, bool))


class TestImageLoss:
    def test_identity(self):
        x = np.random.default_rng(0).random((16, 16, 3))
        assert image_loss(x, x, 0.2) == 0.0
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-15)

    def test_pure_l1(self):
        assert image_loss(np.ones((8, 8, 3)), np.zeros((8, 8, 3)), 0.0) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            image_loss(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)), 0.1)

    def test_ssim_matches_direct_convolution(self):
        rng = np.random.default_rng(1)
        x, y = rng.random((32, 32, 3)), rng.random((32, 32, 3))
        assert ssim(x, y) == pytest.approx(direct_ssim(x, y), abs=1e-6)
        y2 = np.clip(x + rng.normal(scale=0.05, size=x.shape), 0, 1)
        assert ssim(x, y2) == pytest.approx(direct_ssim(x, y2), abs=1e-6)

    def test_ssim_grad_fd(self):
        rng = np.random.default_rng(2)
        x, y = rng.random((12, 13, 3)), rng.random((12, 13, 3))
        g = ssim_grad(x, y)
        h = 1e-6
        for idx in [(0, 0, 0), (5, 6, 1), (11, 12, 2), (3, 9, 0)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            assert g[idx] == pytest.approx((ssim(xp, y) - ssim(xm, y)) / (2 * h), rel=1e-5, abs=1e-10)

    def test_psnr(self):
        x = np.full((4, 4, 3), 0.5)
        assert psnr(x, x) == math.inf
        assert psnr(x, x + 0.1) == pytest.approx(20.0)

    def test_l1(self):
        assert l1_loss(np.zeros(4), np.array([1.0, -1, 2, 0])) == 1.0


class TestNormalConsistency:
    def test_parallel(self):
        assert normal_consistency_loss(tight([[0.2, 0.2, 0]]), tri_mesh()) == 0.0

    def test_orthogonal(self):
        s = tight([[0.2, 0.2, 0]], scales=(0.001, 0.05, 0.05))
        assert normal_consistency_loss(s, tri_mesh()) == pytest.approx(1.0, abs=1e-15)

    def test_antiparallel(self):
        q = rotmat_to_quat(np.diag([1.0, -1.0, -1.0]))
        s = tight([[0.2, 0.2, 0]], rotations=q[None])
        # oracle: the smaller of the two signed variants
        n = quat_to_rotmat(q)[:, 2]
        oracle = min(1 - n @ [0, 0, 1], 1 + n @ [0, 0, 1])
        assert normal_consistency_loss(s, tri_mesh()) == pytest.approx(oracle, abs=1e-15)

    def test_invariant_to_rotation_about_face_normal(self):
        rng = np.random.default_rng(3)
        q = rng.normal(size=(10, 4))
        s = tight(rng.uniform(0, 0.3, (10, 3)), scales=np.exp(rng.uniform(-5, -2, (10, 3))), rotations=q)
        base = normal_consistency_loss(s, tri_mesh())
        for ang in (0.3, 1.7, -2.2):
            c, sn = np.cos(ang), np.sin(ang)
            Rz = np.array([[c, -sn, 0], [sn, c, 0], [0, 0, 1]])
            s2 = s.copy()
            s2.rotations = np.array([rotmat_to_quat(Rz @ R) for R in quat_to_rotmat(q)])
            assert normal_consistency_loss(s2, tri_mesh()) == pytest.approx(base, abs=1e-12)

    def test_loose_excluded(self):
        s = tight([[0.2, 0.2, 0]], scales=(0.001, 0.05, 0.05))
        s.tight[:] = False
        assert normal_consistency_loss(s, tri_mesh()) == 0.0


class TestScaleLoss:
    def test_value(self):
        assert scale_loss(tight([[0, 0, 0]], scales=0.05), 0.1, 10, 0.1) == pytest.approx(0.505, abs=1e-12)

    def test_zero_at_cap(self):
        s = tight([[0, 0, 0]], scales=(1e-300, 0.04, 0.1))
        assert scale_loss(s, 0.1, 10, 0.1) == pytest.approx(0.0, abs=1e-15)

    def test_loose_excluded(self):
        s = tight([[0, 0, 0], [0, 0, 1]], scales=0.05)
        s.tight[1] = False
        s.raw_scales[1] = 3.0
        assert scale_loss(s, 0.1, 10, 0.1) == pytest.approx(0.505, abs=1e-12)


class TestProjectionLoss:
    def test_on_face(self):
        assert projection_loss(tight([[0.2, 0.3, 0]]), tri_mesh()) == pytest.approx(0.0, abs=1e-15)

    def test_height(self):
        assert projection_loss(tight([[0.2, 0.3, 0.07]]), tri_mesh()) == pytest.approx(0.07, abs=1e-15)

    def test_matches_closest_point_oracle(self):
        rng = np.random.default_rng(4)
        mesh = cube_mesh()
        pos = rng.uniform(-0.6, 0.6, (50, 3))
        faces = rng.integers(0, mesh.n_faces, 50)
        s = tight(pos)
        s.bound_face = faces
        tri = mesh.triangles()
        oracle = math.fsum(closest_point_on_triangle(p, tri[f])[1] for p, f in zip(pos, faces))
        assert projection_loss(s, mesh) == pytest.approx(oracle, abs=1e-9)

    def test_lipschitz(self):
        rng = np.random.default_rng(5)
        mesh = tri_mesh()
        for _ in range(200):
            a = rng.uniform(-1, 1.5, 3)
            b = a + rng.normal(scale=0.3, size=3)
            la, lb = projection_loss(tight([a]), mesh), projection_loss(tight([b]), mesh)
            assert abs(la - lb) <= np.linalg.norm(a - b) + 1e-12


class TestTotalLoss:
    def _state(self):
        rng = np.random.default_rng(6)
        mesh = tri_mesh()
        s = tight(rng.uniform(0, 0.4, (8, 3)) * [1, 1, 0.05], scales=np.exp(rng.uniform(-4, -1, (8, 3))),
                  rotations=rng.normal(size=(8, 4)))
        s.tight[-2:] = False
        r, t = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        return r, t, s, mesh

    def test_composition(self):
        r, t, s, mesh = self._state()
        w = LossWeights()
        total, terms = total_loss(r, t, s, mesh, w)
        hand = (image_loss(r, t, w.lambda_img) + w.lambda_nc * normal_consistency_loss(s, mesh)
                + scale_loss(s, w.lambda_min, w.lambda_max, w.rho) + w.lambda_proj * projection_loss(s, mesh))
        assert total == pytest.approx(hand, abs=1e-12)
        assert all(v >= 0 for v in terms.values())

    def test_zero_weights(self):
        r, t, s, mesh = self._state()
        w = LossWeights(lambda_nc=0, lambda_proj=0, lambda_min=0, lambda_max=0)
        total, _ = total_loss(r, t, s, mesh, w)
        assert total == image_loss(r, t, w.lambda_img)

    def test_aligned_and_matching(self):
        s = tight([[0.2, 0.2, 0]], scales=(0.1, 1e-300, 0.1))
        s.raw_scales[0] = np.log([0.1, 0.1, 1e-300])
        x = np.full((8, 8, 3), 0.3)
        total, _ = total_loss(x, x, s, tri_mesh(), LossWeights())
        assert total == pytest.approx(0.0, abs=1e-12)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_nc=-1)
