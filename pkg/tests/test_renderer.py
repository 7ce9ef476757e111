import numpy as np
import pytest

from meshsplat.core import Camera
from meshsplat.renderer import ALPHA_MAX, occlusion_mask, render, render_reference
from meshsplat.splats import SplatSet

from conftest import front_camera, random_splats


def centred_camera(size=33, f=40.0):
    # the optical axis passes through the centre of pixel (size // 2, size // 2)
    c = size // 2 + 0.5
    return Camera(f, f, c, c, size, size, np.eye(3), np.zeros(3))


def flat_splat(z, rgb, opacity, scale=5.0):
    return SplatSet.create([[0, 0, z]], [scale, scale, scale], opacity, colors=rgb)


class TestBlending:
    def test_single_splat_is_clamped_colour(self, backend):
        cam = centred_camera()
        rgb = np.array([0.2, 0.6, 0.9])
        out = render(flat_splat(3.0, rgb, 1 - 1e-12), cam, backend=backend)
        np.testing.assert_allclose(out.image[16, 16], ALPHA_MAX * rgb, atol=1e-12)

    def test_two_layers(self, backend):
        cam = centred_camera()
        s = flat_splat(2.0, [1, 0, 0], 0.5).concat(flat_splat(3.0, [0, 1, 0], 0.5))
        out = render(s, cam, backend=backend)
        np.testing.assert_allclose(out.image[16, 16], [0.5, 0.25, 0], atol=1e-12)
        # input order does not matter
        s2 = s.subset([1, 0])
        assert np.array_equal(render(s2, cam, backend=backend).image, out.image)

    def test_empty(self, backend):
        cam = centred_camera()
        for fn in (lambda s: render(s, cam, backend=backend), lambda s: render_reference(s, cam)):
            out = fn(SplatSet.empty())
            assert (out.image == 0).all() and (out.final_T == 1).all()

    def test_partition_of_unity(self, backend):
        rng = np.random.default_rng(0)
        s = random_splats(rng, 80)
        s.sh[:] = 0
        s.sh[:, 0, :] = 0.5 / 0.28209479177387814  # rgb exactly 1
        out = render(s, front_camera(40), backend=backend)
        np.testing.assert_allclose(out.image[..., 0] + out.final_T, 1.0, atol=1e-9)

    def test_transmittance_cutoff(self, backend):
        cam = centred_camera()
        front = [flat_splat(1.0 + 0.1 * k, [1, 1, 1], 1 - 1e-9, scale=50) for k in range(3)]
        back = [flat_splat(4.0 + k, [0, 1, 0], 0.9, scale=0.3) for k in range(4)]
        s = front[0]
        for other in front[1:] + back:
            s = s.concat(other)
        out = render(s, cam, backend=backend)
        # T = 0.01^2 after two layers; the third would drop it below the cutoff
        assert out.contributed[:2].all() and not out.contributed[2:].any()
        ref = render_reference(s, cam)
        np.testing.assert_array_equal(ref.contributed, out.contributed)
        # dropping a non-contributing splat leaves the image bit-identical
        assert np.array_equal(render(s.subset([0, 1, 2, 3, 5, 6]), cam, backend=backend).image, out.image)


class TestTiledMatchesReference:
    def test_random_scenes(self, backend):
        rng = np.random.default_rng(1)
        for trial in range(20):
            s = random_splats(rng, 50, sh_degree=trial % 4)
            cam = front_camera(32 + trial % 3 * 7)
            a = render(s, cam, backend=backend)
            b = render_reference(s, cam)
            np.testing.assert_allclose(a.image, b.image, atol=1e-6)
            np.testing.assert_allclose(a.final_T, b.final_T, atol=1e-9)
            np.testing.assert_array_equal(a.contributed, b.contributed)

    def test_permutation_invariant(self, backend):
        rng = np.random.default_rng(2)
        s = random_splats(rng, 60, sh_degree=1)
        cam = front_camera(40)
        base = render(s, cam, backend=backend).image
        for _ in range(5):
            perm = rng.permutation(len(s))
            assert np.array_equal(render(s.subset(perm), cam, backend=backend).image, base)

    def test_non_contributing_removal(self, backend):
        rng = np.random.default_rng(3)
        s = random_splats(rng, 60)
        s.raw_opacity[:10] = -8.0  # faint: never pass the alpha threshold
        cam = front_camera(32)
        out = render(s, cam, backend=backend)
        dead = np.flatnonzero(~out.contributed)
        assert len(dead) >= 10
        keep = np.setdiff1d(np.arange(len(s)), dead[:5])
        assert np.array_equal(render(s.subset(keep), cam, backend=backend).image, out.image)

    def test_ever_visible_is_ored(self, backend):
        rng = np.random.default_rng(4)
        s = random_splats(rng, 30)
        s.ever_visible[:] = False
        s.ever_visible[0] = True
        s.positions[0] = [0, 0, -10]  # behind the camera: culled but keeps its flag
        out = render(s, front_camera(32), backend=backend)
        np.testing.assert_array_equal(s.ever_visible, out.contributed | (np.arange(30) == 0))


class TestOcclusion:
    def setup_method(self):
        self.cam = centred_camera(size=17, f=20.0)
        self.depth = np.full((17, 17), 2.0)

    def _mask(self, z, delta=0.01, depth=None):
        s = SplatSet.create([[0, 0, z]], 0.05, 0.5)
        return occlusion_mask(s, self.depth if depth is None else depth, self.cam, delta)[0]

    def test_behind_wall(self):
        assert self._mask(2.5)

    def test_on_surface(self):
        assert not self._mask(2.0)

    def test_tolerance_band(self):
        assert not self._mask(2.005)

    def test_infinite_delta(self):
        assert not self._mask(50.0, delta=np.inf)

    def test_no_surface(self):
        assert not self._mask(50.0, depth=np.full((17, 17), np.inf))

    def test_outside_image(self):
        s = SplatSet.create([[10, 0, 3]], 0.05, 0.5)
        assert not occlusion_mask(s, self.depth, self.cam)[0]

    def test_masked_splats_never_contribute(self, backend):
        s = flat_splat(1.5, [1, 0, 0], 0.8, scale=0.2).concat(flat_splat(2.5, [0, 1, 0], 0.8, scale=0.2))
        out = render(s, self.cam, depth_map=self.depth, backend=backend)
        np.testing.assert_array_equal(out.masked, [False, True])
        np.testing.assert_array_equal(out.contributed, [True, False])
        plain = render(s, self.cam, depth_map=self.depth, occlusion=False, backend=backend)
        assert plain.contributed.all()
