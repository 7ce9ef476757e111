import numpy as np
import pytest

from meshsplat import kernels
from meshsplat.core import Camera
from meshsplat.scenes import SceneSpec, make_synthetic_scene
from meshsplat.splats import SplatSet

BACKENDS = sorted(kernels.BACKENDS)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


def random_splats(rng, n, sh_degree=0, spread=1.0, depth=0.5):
    pos = rng.uniform([-spread, -spread, -depth], [spread, spread, depth], (n, 3))
    s = SplatSet.create(pos, np.exp(rng.uniform(-3.0, -1.5, (n, 3))), rng.uniform(0.05, 0.99, n),
                        rotations=rng.normal(size=(n, 4)), sh_degree=sh_degree)
    s.sh[:] = rng.normal(scale=0.4, size=s.sh.shape)
    s.sh[:, 0, :] += 0.6
    return s


def front_camera(size=32, f=None, eye=(0.2, -0.1, -4.0)):
    f = 0.9 * size if f is None else f
    return Camera.look_at(eye, [0, 0, 0], [0, -1, 0], f, f, size, size)


@pytest.fixture(scope="session")
def cube_scene(tmp_path_factory):
    return make_synthetic_scene(SceneSpec(kind="cube"), tmp_path_factory.mktemp("cube"))


@pytest.fixture(scope="session")
def floating_scene(tmp_path_factory):
    return make_synthetic_scene(SceneSpec(kind="floating"), tmp_path_factory.mktemp("floating"))


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
