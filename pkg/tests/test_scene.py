import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import pinhole, plane_scene
from shadowlight.scene import (Camera, DepthMap, MaterialMaps, OrientedPointCloud, Scene, SceneError,
                               SimilarityTransform, depth_to_cloud, load_scene, normalize_scene,
                               save_scene)
from shadowlight.synthbench import gen_scene


# --- invariants on construction ---------------------------------------------------------

def test_camera_rejects_nonpositive_focal_length():
    with pytest.raises(SceneError, match="focal"):
        Camera(0.0, 1.0, 0, 0, 4, 4)


def test_camera_rejects_improper_rotation():
    with pytest.raises(SceneError, match="rotation"):
        Camera(1.0, 1.0, 0, 0, 4, 4, np.diag([1.0, 1.0, -1.0]))


def test_camera_center_is_pose_of_origin():
    rot = Camera.look_at([1, 2, 3], [0, 0, 0], [0, 0, 1], 60, 8, 8).rotation
    cam = Camera(5, 5, 3, 3, 8, 8, rot, [1.0, 2.0, 3.0])
    assert np.allclose(cam.center, [1, 2, 3])


def test_depth_map_rejects_negative_depth():
    with pytest.raises(SceneError, match="depth"):
        DepthMap(np.array([[1.0, -1.0], [1.0, 1.0]]))


def test_cloud_rejects_non_unit_normal():
    pts = np.zeros((2, 2, 3))
    nrm = np.zeros((2, 2, 3))
    nrm[..., 2] = 1.0
    nrm[0, 0] = 0.0
    with pytest.raises(SceneError, match="unit-norm"):
        OrientedPointCloud(pts, nrm, np.ones((2, 2), bool))


def test_materials_reject_negative_reflectance_and_bad_alpha():
    with pytest.raises(SceneError):
        MaterialMaps(-np.ones((2, 2)), np.ones((2, 2)), 10.0)
    with pytest.raises(SceneError, match="alpha"):
        MaterialMaps(np.ones((2, 2)), np.ones((2, 2)), 0.0)


def test_scene_requires_aligned_materials():
    s = plane_scene(8, 8)
    with pytest.raises(SceneError, match="aligned"):
        Scene(s.cloud, s.camera, MaterialMaps.uniform((4, 4)))


# --- depth_to_cloud -----------------------------------------------------------------------

def test_fronto_parallel_plane_normals_face_camera():
    s = plane_scene(16, 16, depth=3.0)
    n = s.cloud.normals[s.cloud.mask]
    assert len(n) == 14 * 14
    assert np.allclose(n, [0.0, 0.0, -1.0], atol=1e-12)


def test_isolated_pixel_is_invalid():
    d = np.full((5, 5), np.nan)
    d[2, 2] = 1.0
    cam = pinhole(5, 5)
    with pytest.raises(SceneError, match="no valid pixels"):
        depth_to_cloud(DepthMap(d), cam)
    d2 = np.full((6, 6), 1.0)
    d2[0:6, 0:3] = np.nan
    d2[3, 1] = 1.0
    cloud = depth_to_cloud(DepthMap(d2), pinhole(6, 6))
    assert not cloud.mask[3, 1]


def _sphere_depth(cam, center, radius):
    vv, uu = np.mgrid[0:cam.height, 0:cam.width]
    rays = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu, float)], -1)
    a = np.sum(rays * rays, -1)
    b = -2 * rays @ center
    c = center @ center - radius ** 2
    disc = b * b - 4 * a * c
    t = (-b - np.sqrt(np.where(disc > 0, disc, np.nan))) / (2 * a)
    return t                           # z-depth because ray z-component is 1


def test_hemisphere_normals_match_closed_form():
    cam = pinhole(96, 96, f=150.0)
    center = np.array([0.0, 0.0, 4.0])
    radius = 1.0
    depth = _sphere_depth(cam, center, radius)
    cloud = depth_to_cloud(DepthMap(depth), cam)
    pts = cloud.points[cloud.mask]
    nrm = cloud.normals[cloud.mask]
    truth = (pts - center) / radius
    truth /= np.linalg.norm(truth, axis=1, keepdims=True)
    # keep points whose true normal is at most 70 degrees from the viewing ray
    view = -pts / np.linalg.norm(pts, axis=1, keepdims=True)
    inner = np.einsum("ij,ij->i", truth, view) > np.cos(np.radians(70))
    ang = np.degrees(np.arccos(np.clip(np.einsum("ij,ij->i", nrm, truth), -1, 1)))
    assert inner.sum() > 1000
    assert ang[inner].max() < 2.0


def test_reprojection_reproduces_pixels():
    s, depth, _ = gen_scene("steps", 3, 48, 40)
    cam = s.camera
    u, v, _ = cam.project(s.cloud.points)
    vv, uu = np.mgrid[0:cam.height, 0:cam.width]
    m = s.cloud.mask
    assert np.max(np.abs(u[m] - uu[m])) < 1e-4
    assert np.max(np.abs(v[m] - vv[m])) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_random_depth_maps_give_unit_normals(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(4, 20, size=2)
    d = rng.uniform(1.0, 1.04, size=(h, w))
    d[rng.random((h, w)) < 0.1] = np.nan
    try:
        cloud = depth_to_cloud(DepthMap(d), pinhole(w, h, 20.0))
    except SceneError:
        return
    n = np.linalg.norm(cloud.normals[cloud.mask], axis=-1)
    assert np.all(np.abs(n - 1) <= 1e-6)
    assert np.all(cloud.normals[~cloud.mask] == 0)


# --- normalize_scene ----------------------------------------------------------------------

def _cloud_scene(pts):
    h, w = pts.shape[:2]
    nrm = np.zeros_like(pts)
    nrm[..., 2] = 1.0
    cam = Camera(10, 10, w / 2, h / 2, w, h, np.eye(3), [0.0, 0.0, -5.0])
    return Scene(OrientedPointCloud(pts, nrm, np.ones((h, w), bool)), cam, MaterialMaps.uniform((h, w)))


def test_unit_cube_scene_gets_identity_transform():
    pts = np.array([[[-0.5, -0.5, -0.5], [0.5, 0.5, 0.5]]])
    s, tf = normalize_scene(_cloud_scene(pts))
    assert tf.scale == 1.0 and tf.translation == (0.0, 0.0, 0.0)


def test_ten_unit_scene_is_scaled_by_a_tenth():
    pts = np.array([[[0.0, 0.0, 0.0], [10.0, 10.0, 10.0], [3.0, 7.0, 1.0]]])
    s, tf = normalize_scene(_cloud_scene(pts))
    assert tf.scale == pytest.approx(0.1)
    p = s.cloud.valid_points()
    assert p.min() == pytest.approx(-0.5) and p.max() == pytest.approx(0.5)


def test_normalization_round_trip_and_idempotence(rng):
    pts = rng.normal(size=(3, 50, 3)) * 7 + 20
    scene = _cloud_scene(pts)
    s1, tf = normalize_scene(scene)
    back = tf.inverse(s1.cloud.points)
    assert np.max(np.abs(back - pts) / np.abs(pts).max()) < 1e-9
    s2, _ = normalize_scene(s1)
    assert np.max(np.abs(s2.cloud.points - s1.cloud.points)) < 1e-9
    assert np.allclose(tf.apply(scene.camera.center), s1.camera.center)


def test_similarity_transform_inverse():
    tf = SimilarityTransform(0.25, (1.0, -2.0, 3.0))
    x = np.array([4.0, 5.0, 6.0])
    assert np.allclose(tf.inverse(tf.apply(x)), x)


# --- file I/O -----------------------------------------------------------------------------

def test_save_load_round_trip_is_bitwise(tmp_path):
    scene, depth, lights = gen_scene("plane-spheres", 2, 24, 20)
    path = tmp_path / "s.json"
    save_scene(scene, path, depth=depth, lights=[{"position": [1.0, 2.0, 3.0], "intensity": 0.5}])
    loaded, ldepth = load_scene(path)
    for a, b in ((scene.cloud.points, loaded.cloud.points), (scene.cloud.normals, loaded.cloud.normals),
                 (scene.cloud.mask, loaded.cloud.mask), (scene.materials.kd, loaded.materials.kd),
                 (scene.materials.ks, loaded.materials.ks), (scene.camera.rotation, loaded.camera.rotation),
                 (scene.camera.translation, loaded.camera.translation)):
        assert np.array_equal(a, b)
    assert np.array_equal(depth.depth[depth.mask], ldepth.depth[ldepth.mask])
    assert loaded.materials.alpha == scene.materials.alpha


def _mutate(tmp_path, fn):
    scene, depth, _ = gen_scene("plane-box", 0, 24, 24)
    path = tmp_path / "s.json"
    save_scene(scene, path, depth=depth)
    doc = json.loads(path.read_text())
    fn(doc)
    path.write_text(json.dumps(doc))
    return path


def test_load_rejects_zero_normal(tmp_path):
    def zero_normal(doc):
        for r, row in enumerate(doc["normals"]):
            for c, n in enumerate(row):
                if n is not None:
                    row[c] = [0.0, 0.0, 0.0]
                    return
    with pytest.raises(SceneError, match="unit-norm"):
        load_scene(_mutate(tmp_path, zero_normal))


def test_load_rejects_negative_depth(tmp_path):
    def negative(doc):
        doc["depth"]["values"][5][5] = -1.0
    with pytest.raises(SceneError, match="depth"):
        load_scene(_mutate(tmp_path, negative))


def test_load_reports_json_errors_with_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"format": "shadowlight-scene",\n  "camera": }')
    with pytest.raises(SceneError, match="line 2"):
        load_scene(p)
