"""Geometry, camera and material containers plus depth-map conversion.

Camera convention: pixel ``(u, v)`` is (column, row); the camera frame looks
down +z with +x to the right and +y down. ``rotation``/``translation`` map
camera coordinates to world coordinates.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SCENE_FORMAT = "shadowlight-scene"
SCENE_VERSION = 1


class SceneError(ValueError):
    """Raised when a scene violates one of its invariants or cannot be parsed."""


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise SceneError("focal-length invariant violated: fx and fy must be > 0")
        if self.width < 1 or self.height < 1:
            raise SceneError("image dimensions must be positive")
        rot = _frozen(self.rotation)
        trans = _frozen(self.translation)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise SceneError("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1) > 1e-6:
            raise SceneError("rotation invariant violated: matrix must be orthonormal with det +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates (the pose applied to the origin)."""
        return self.rotation @ np.zeros(3) + self.translation

    @property
    def up(self) -> np.ndarray:
        # camera +y points down the image
        return -self.rotation[:, 1]

    def backproject(self, u, v, depth):
        """Pixel coordinates and z-depth to world points, shape ``(..., 3)``."""
        u, v, depth = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float),
                                          np.asarray(depth, float))
        cam = np.stack([(u - self.cx) / self.fx * depth,
                        (v - self.cy) / self.fy * depth,
                        depth], axis=-1)
        return cam @ self.rotation.T + self.translation

    def project(self, points):
        """World points to ``(u, v, z)`` with z the camera-frame depth."""
        cam = (np.asarray(points, float) - self.translation) @ self.rotation
        z = cam[..., 2]
        return self.fx * cam[..., 0] / z + self.cx, self.fy * cam[..., 1] / z + self.cy, z

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def look_at(cls, eye, target, world_up, fov_deg, width, height):
        """Pinhole camera at ``eye`` looking at ``target`` with a horizontal field of view."""
        eye = np.asarray(eye, float)
        fwd = np.asarray(target, float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, world_up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd], axis=1)
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height, rot, eye)


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel z-depth (camera-frame distance along the optical axis)."""

    depth: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        depth = np.array(self.depth, dtype=np.float64)
        if depth.ndim != 2:
            raise SceneError("depth map must be two-dimensional")
        mask = np.isfinite(depth) if self.mask is None else np.array(self.mask, dtype=bool)
        if mask.shape != depth.shape:
            raise SceneError("depth mask shape does not match depth values")
        valid = depth[mask]
        if not np.all(np.isfinite(valid)) or np.any(valid <= 0):
            raise SceneError("depth invariant violated: valid depths must be finite and > 0")
        depth[~mask] = np.nan
        object.__setattr__(self, "depth", _frozen(depth))
        object.__setattr__(self, "mask", _frozen(mask, bool))

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]


@dataclass(frozen=True, eq=False)
class OrientedPointCloud:
    """Pixel-aligned points ``(H, W, 3)``, unit normals and a validity mask."""

    points: np.ndarray
    normals: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        points = _frozen(self.points)
        normals = _frozen(self.normals)
        mask = _frozen(self.mask, bool)
        if points.shape != normals.shape or points.shape[:2] != mask.shape or points.shape[-1] != 3:
            raise SceneError("points, normals and mask must share dimensions")
        if mask.any():
            norms = np.linalg.norm(normals[mask], axis=-1)
            if not np.all(np.abs(norms - 1.0) <= 1e-6):
                raise SceneError("unit-norm invariant violated: every valid normal must have length 1")
            if not np.all(np.isfinite(points[mask])):
                raise SceneError("valid points must be finite")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self):
        return self.mask.shape

    @functools.cached_property
    def _valid(self):
        pts, nrm = self.points[self.mask], self.normals[self.mask]
        pts.setflags(write=False)
        nrm.setflags(write=False)
        return pts, nrm

    def valid_points(self):
        """``(n, 3)`` read-only array of the valid points in row-major pixel order."""
        return self._valid[0]

    def valid_normals(self):
        return self._valid[1]

    @functools.cached_property
    def _diagonal(self):
        pts = self.valid_points()
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))) if len(pts) else 0.0

    def diagonal(self):
        """Length of the bounding-box diagonal of the valid points."""
        return self._diagonal


@dataclass(frozen=True, eq=False)
class MaterialMaps:
    """Diffuse and specular reflectance maps with a scalar shininess."""

    kd: np.ndarray
    ks: np.ndarray
    alpha: float

    def __post_init__(self):
        kd = _frozen(self.kd)
        ks = _frozen(self.ks)
        if kd.shape != ks.shape or kd.ndim != 2:
            raise SceneError("kd and ks must be 2-D maps of equal shape")
        for name, a in (("kd", kd), ("ks", ks)):
            if not np.all(np.isfinite(a)) or np.any(a < 0):
                raise SceneError(f"reflectance invariant violated: {name} must be finite and >= 0")
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise SceneError("shininess invariant violated: alpha must be > 0")
        object.__setattr__(self, "kd", kd)
        object.__setattr__(self, "ks", ks)
        object.__setattr__(self, "alpha", float(self.alpha))

    @classmethod
    def uniform(cls, shape, kd=1.0, ks=1.0, alpha=10.0):
        return cls(np.full(shape, kd, float), np.full(shape, ks, float), alpha)


@dataclass(frozen=True, eq=False)
class Scene:
    cloud: OrientedPointCloud
    camera: Camera
    materials: MaterialMaps

    def __post_init__(self):
        if self.materials.kd.shape != self.cloud.shape:
            raise SceneError("material maps must be dimension-aligned with the point cloud")
        if self.cloud.shape != (self.camera.height, self.camera.width):
            raise SceneError("point cloud dimensions must match the camera image size")

    @property
    def shape(self):
        return self.cloud.shape

    def with_materials(self, materials: MaterialMaps) -> "Scene":
        return replace(self, materials=materials)


@dataclass(frozen=True)
class SimilarityTransform:
    """``y = scale * x + translation`` with a uniform positive scale."""

    scale: float = 1.0
    translation: tuple = (0.0, 0.0, 0.0)

    def apply(self, x):
        return self.scale * np.asarray(x, float) + np.asarray(self.translation)

    def inverse(self, y):
        return (np.asarray(y, float) - np.asarray(self.translation)) / self.scale


def depth_to_cloud(depth: DepthMap, camera: Camera, max_depth_jump: float = 0.05) -> OrientedPointCloud:
    """Backproject a depth map and estimate normals from central differences.

    A pixel keeps a normal only if all four neighbours are valid and none of
    them differs in depth by more than ``max_depth_jump`` (relative), which
    rejects tangents spanning occlusion boundaries.
    """
    if (depth.height, depth.width) != (camera.height, camera.width):
        raise SceneError(
            f"depth map is {depth.width}x{depth.height} but camera expects "
            f"{camera.width}x{camera.height}")
    h, w = depth.depth.shape
    vv, uu = np.mgrid[0:h, 0:w]
    d = np.where(depth.mask, depth.depth, 1.0)
    points = camera.backproject(uu, vv, d)

    valid = depth.mask.copy()
    ok = np.zeros_like(valid)
    inner = (slice(1, -1), slice(1, -1))
    ok[inner] = valid[inner]
    dc = d[inner]
    for sl in ((slice(1, -1), slice(2, None)), (slice(1, -1), slice(None, -2)),
               (slice(2, None), slice(1, -1)), (slice(None, -2), slice(1, -1))):
        ok[inner] &= valid[sl] & (np.abs(d[sl] - dc) <= max_depth_jump * dc)

    tu = np.zeros_like(points)
    tv = np.zeros_like(points)
    tu[:, 1:-1] = points[:, 2:] - points[:, :-2]
    tv[1:-1, :] = points[2:, :] - points[:-2, :]
    n = np.cross(tu, tv)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 1e-12
    n = n / np.where(norm > 0, norm, 1.0)[..., None]
    facing = np.einsum("hwk,hwk->hw", n, camera.center - points)
    n = np.where((facing < 0)[..., None], -n, n)
    # renormalise so unit length holds to rounding
    n /= np.linalg.norm(n, axis=-1, keepdims=True).clip(1e-300)
    n[~ok] = 0.0
    points[~ok] = 0.0
    if not ok.any():
        raise SceneError("no valid pixels with a valid 4-neighbourhood")
    return OrientedPointCloud(points, n, ok)


def normalize_scene(scene: Scene) -> tuple[Scene, SimilarityTransform]:
    """Scale and shift the scene so its valid points fit the unit cube at the origin.

    Returns the normalized copy and the transform mapping original coordinates
    to normalized ones (use ``transform.inverse`` to map results back).
    """
    pts = scene.cloud.valid_points()
    if len(pts) == 0:
        raise SceneError("cannot normalize an empty scene")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float(np.max(hi - lo))
    scale = 1.0 / extent if extent > 0 else 1.0
    center = 0.5 * (lo + hi)
    tf = SimilarityTransform(scale, tuple((-scale * center).tolist()))
    if scale == 1.0 and not center.any():
        return scene, tf
    mask = scene.cloud.mask
    points = np.where(mask[..., None], tf.apply(scene.cloud.points), 0.0)
    cloud = OrientedPointCloud(points, scene.cloud.normals, mask)
    cam = replace(scene.camera, translation=tf.apply(scene.camera.translation))
    return Scene(cloud, cam, scene.materials), tf


# --- scene file I/O -------------------------------------------------------

def _grid_to_json(a, mask):
    return [[float(x) if m else None for x, m in zip(row, mrow)] for row, mrow in zip(a, mask)]


def _map_to_json(a):
    a = np.asarray(a)
    if np.all(a == a.flat[0]):
        return float(a.flat[0])
    return a.tolist()


def save_scene(scene: Scene, path, depth: DepthMap | None = None, lights=None) -> None:
    """Write a scene as JSON; floats are serialized with full round-trip precision.

    ``depth`` defaults to the camera-frame depth of the stored points. ``lights``
    (a list of ``{"position": [...], "intensity": ...}``) is stored verbatim as
    optional ground-truth metadata.
    """
    mask = scene.cloud.mask
    if depth is None:
        _, _, z = scene.camera.project(scene.cloud.points)
        depth = DepthMap(np.where(mask, z, np.nan), mask)
    doc = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "camera": scene.camera.to_dict(),
        "depth": {"values": _grid_to_json(depth.depth, depth.mask)},
        "points": [[list(map(float, p)) if m else None for p, m in zip(row, mrow)]
                   for row, mrow in zip(scene.cloud.points, mask)],
        "normals": [[list(map(float, n)) if m else None for n, m in zip(row, mrow)]
                    for row, mrow in zip(scene.cloud.normals, mask)],
        "materials": {"kd": _map_to_json(scene.materials.kd),
                      "ks": _map_to_json(scene.materials.ks),
                      "alpha": scene.materials.alpha},
    }
    if lights is not None:
        doc["lights"] = lights
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, allow_nan=False))
    tmp.replace(path)


def _field(doc, key, where):
    try:
        return doc[key]
    except (KeyError, TypeError):
        raise SceneError(f"missing field '{key}' in {where}") from None


def _read_pfm_depth(ref, base):
    from .imageio import read_pfm
    p = Path(ref)
    if not p.is_absolute():
        p = Path(base) / p
    return read_pfm(p)


def scene_from_dict(doc, base_dir=".") -> tuple[Scene, DepthMap]:
    if doc.get("format") != SCENE_FORMAT:
        raise SceneError(f"field 'format': expected '{SCENE_FORMAT}'")
    cam_doc = _field(doc, "camera", "document")
    try:
        camera = Camera(**{k: _field(cam_doc, k, "camera") for k in
                           ("fx", "fy", "cx", "cy", "width", "height", "rotation", "translation")})
    except TypeError as exc:
        raise SceneError(f"field 'camera': {exc}") from None

    ddoc = _field(doc, "depth", "document")
    if "pfm" in ddoc:
        values = _read_pfm_depth(ddoc["pfm"], base_dir).astype(np.float64)
        mask = np.isfinite(values) & (values != 0)
    else:
        raw = _field(ddoc, "values", "depth")
        mask = np.array([[x is not None for x in row] for row in raw], dtype=bool)
        values = np.array([[np.nan if x is None else x for x in row] for row in raw], dtype=float)
    depth = DepthMap(values, mask)

    if "points" in doc and "normals" in doc:
        shape = (camera.height, camera.width)
        pmask = np.array([[p is not None for p in row] for row in doc["points"]], dtype=bool)
        if pmask.shape != shape:
            raise SceneError(f"field 'points': expected {shape[1]}x{shape[0]} grid")
        pts = np.zeros(shape + (3,))
        nrm = np.zeros(shape + (3,))
        for (r, c) in zip(*np.nonzero(pmask)):
            pts[r, c] = doc["points"][r][c]
            n = doc["normals"][r][c]
            if n is None:
                raise SceneError(f"field 'normals' row {r} col {c}: missing normal for valid point")
            nrm[r, c] = n
        cloud = OrientedPointCloud(pts, nrm, pmask)
    else:
        cloud = depth_to_cloud(depth, camera)

    mdoc = _field(doc, "materials", "document")
    shape = cloud.shape
    kd = np.broadcast_to(np.asarray(_field(mdoc, "kd", "materials"), float), shape)
    ks = np.broadcast_to(np.asarray(_field(mdoc, "ks", "materials"), float), shape)
    materials = MaterialMaps(kd, ks, _field(mdoc, "alpha", "materials"))
    return Scene(cloud, camera, materials), depth


def load_scene(path) -> tuple[Scene, DepthMap]:
    """Read a scene JSON file written by :func:`save_scene`."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: JSON parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return scene_from_dict(doc, path.parent)


def load_scene_lights(path):
    """Ground-truth lights stored alongside a scene, or ``None``."""
    return json.loads(Path(path).read_text()).get("lights")
