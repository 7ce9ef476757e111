import json

import numpy as np
import pytest

from meshsplat.gradients import (GradStore, NonFiniteGradient, analytic_term_grads, backward_losses,
                                 backward_render, check_gradients, gradient_fixture, scale_grad)
from meshsplat.losses import LossWeights
from meshsplat.mesh import TriMesh
from meshsplat.renderer import render, render_reference
from meshsplat.splats import SplatSet

from test_renderer import centred_camera


@pytest.fixture(scope="module")
def small_scene():
    return gradient_fixture(n_splats=10, size=24, seed=3, sh_degree=2)


def test_single_splat_opacity_closed_form(backend):
    cam = centred_camera()
    rgb = np.array([0.3, 0.5, 0.7])
    s = SplatSet.create([[0, 0, 3.0]], 0.5, 0.5, colors=rgb)
    out = render(s, cam, backend=backend)
    dL = np.zeros_like(out.image)
    dL[16, 16] = 1.0
    grads, _ = backward_render(s, out, dL)
    sig = 0.5 * (1 - 0.5)
    assert grads["raw_opacity"][0] == pytest.approx(sig * rgb.sum(), rel=1e-12)


def test_transparent_splat_has_no_colour_gradient(backend):
    cam = centred_camera()
    s = SplatSet.create([[0, 0, 3.0], [0, 0, 4.0]], 0.5, [1e-13, 0.5], colors=[0.3, 0.5, 0.7])
    out = render(s, cam, backend=backend)
    grads, _ = backward_render(s, out, np.ones_like(out.image))
    assert not grads["sh"][0].any()
    assert grads["sh"][1].any()


def test_tiled_backward_matches_reference(backend):
    scene = gradient_fixture(n_splats=30, size=40, seed=5, sh_degree=1)
    dL = np.random.default_rng(0).normal(size=scene.target.shape)
    tiled = render(scene.splats, scene.cam, scene.depth_map, backend=backend, update_visibility=False)
    ref = render_reference(scene.splats, scene.cam, scene.depth_map)
    a, _ = backward_render(scene.splats, tiled, dL)
    b, _ = backward_render(scene.splats, ref, dL)
    for name in a:
        np.testing.assert_allclose(a[name], b[name], atol=1e-8, rtol=0)


def test_backward_is_thread_count_independent():
    scene = gradient_fixture(n_splats=30, size=40, seed=6, sh_degree=1)
    dL = np.random.default_rng(1).normal(size=scene.target.shape)
    results = []
    for threads in (1, 3):
        out = render(scene.splats, scene.cam, scene.depth_map, num_threads=threads, update_visibility=False)
        results.append(backward_render(scene.splats, out, dL))
    for name in results[0][0]:
        assert np.array_equal(results[0][0][name], results[1][0][name])
    assert np.array_equal(results[0][1], results[1][1])


def test_nonfinite_image_gradient_is_reported():
    scene = gradient_fixture(n_splats=5, size=16, seed=0, sh_degree=0)
    out = render(scene.splats, scene.cam, update_visibility=False)
    dL = np.zeros_like(out.image)
    dL[3, 4, 1] = np.nan
    with pytest.raises(NonFiniteGradient, match=r"\(3, 4\)"):
        backward_render(scene.splats, out, dL)


def test_gradstore_trap():
    s = SplatSet.create(np.zeros((3, 3)), 0.1, 0.5)
    g = GradStore.zeros_like(s)
    g.raw_scales[2, 1] = np.inf
    with pytest.raises(NonFiniteGradient, match="splat 2"):
        g.check_finite()


def test_loose_invisible_splats_get_zero_total_gradient():
    scene = gradient_fixture(n_splats=20, size=32, seed=2, sh_degree=1)
    out = render(scene.splats, scene.cam, scene.depth_map, update_visibility=False)
    idle = ~out.contributed & ~scene.splats.tight
    assert idle.sum() >= 3
    grads = analytic_term_grads(scene, "total")
    for g in grads.values():
        assert not g[idle].any()


def test_regularizers_ignore_loose_splats():
    scene = gradient_fixture(n_splats=20, size=16, seed=4, sh_degree=0)
    grads = backward_losses(scene.splats, scene.mesh, scene.weights)
    loose = ~scene.splats.tight
    for g in grads.values():
        assert not g[loose].any()


def test_projection_gradient_is_normal():
    mesh = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    s = SplatSet.create([[0.2, 0.3, 0.05]], 0.05, 0.5, bound_face=[0], tight=[True])
    w = LossWeights(lambda_nc=0, lambda_min=0, lambda_max=0, lambda_proj=50)
    g = backward_losses(s, mesh, w)["positions"][0]
    np.testing.assert_allclose(g, [0, 0, 50], atol=1e-12)


def test_scale_kink_subgradient_zero():
    s = SplatSet.create([[0, 0, 0]], 0.05, 0.5, bound_face=[0], tight=[True])
    s.raw_scales[0] = [-3.0, -4.0, -2.0]
    rho = float(np.exp(-2.0))
    g = scale_grad(s, 0.0, 10.0, rho)["raw_scales"][0]
    assert g[2] == 0.0


def test_image_l1_check_20_splats():
    scene = gradient_fixture(n_splats=20, size=24, seed=7, sh_degree=1, weights=LossWeights(lambda_img=0.0))
    report = check_gradients(scene, terms=("L_img",))
    assert report.passed, report.table()


def test_full_check_small_scene(small_scene):
    report = check_gradients(small_scene)
    assert report.passed, report.table()
    terms = {r["term"] for r in report.rows}
    assert terms == {"L_img", "L_nc", "L_scale", "L_proj", "total"}
    data = json.loads(report.to_json())
    assert data["passed"] and len(data["rows"]) == 25
    assert "PASS" in report.table()


def test_corrupted_gradient_fails(small_scene):
    report = check_gradients(small_scene, terms=("L_img",), corrupt="raw_scales")
    assert not report.passed
    assert {r["param"] for r in report.failures()} == {"raw_scales"}


def test_zero_splats_pass_vacuously(small_scene):
    s = small_scene
    empty = type(s)(s.splats.subset(np.zeros(0, int)), s.mesh, s.cam, s.target, s.depth_map, s.weights)
    report = check_gradients(empty)
    assert report.passed
    assert all(r["count"] == 0 for r in report.rows)
