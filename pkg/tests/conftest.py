import functools

import numpy as np
import pytest

from shadowlight.renderer import ShadowConfig
from shadowlight.scene import Camera, DepthMap, MaterialMaps, Scene, depth_to_cloud
from shadowlight.synthbench import gen_scene


def pinhole(width=32, height=32, f=40.0):
    return Camera(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def plane_scene(width=32, height=32, depth=2.0, kd=1.0, ks=1.0, alpha=10.0):
    """Fronto-parallel plane at constant depth seen by a camera at the origin."""
    cam = pinhole(width, height)
    cloud = depth_to_cloud(DepthMap(np.full((height, width), depth)), cam)
    return Scene(cloud, cam, MaterialMaps.uniform(cloud.shape, kd, ks, alpha))


def random_unit_scene(rng, n=1000, kd=1.0, ks=1.0, alpha=10.0):
    """Unstructured 1000 x 1 'image' of random points with random unit normals in the unit cube."""
    from shadowlight.scene import OrientedPointCloud

    pts = rng.uniform(-0.5, 0.5, size=(1, n, 3))
    nrm = rng.normal(size=(1, n, 3))
    nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
    cam = Camera(100.0, 100.0, n / 2, 0.0, n, 1, np.eye(3), rng.uniform(-2, 2, size=3) + [0, 0, 3])
    cloud = OrientedPointCloud(pts, nrm, np.ones((1, n), bool))
    return Scene(cloud, cam, MaterialMaps.uniform((1, n), kd, ks, alpha))


@functools.lru_cache(maxsize=None)
def cached_scene(preset, seed=0, size=64):
    return gen_scene(preset, seed, size, size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def bench_shadow():
    return ShadowConfig(resolution=128, splat=5)


# --- acceptance verdicts ------------------------------------------------------------------

ACCEPTANCE = {}


def record_verdict(number, title, passed, detail):
    ACCEPTANCE[number] = f"criterion {number} ({title}): {'PASS' if passed else 'FAIL'}; {detail}"
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
