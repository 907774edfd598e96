"""Blinn-Phong image formation with hard shadows from point-splatted cube maps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .scene import OrientedPointCloud, Scene

EPS_DIST = 1e-9


@dataclass(frozen=True, eq=False)
class PointLight:
    position: np.ndarray
    intensity: float = 0.5

    def __post_init__(self):
        pos = np.array(self.position, dtype=np.float64).reshape(3)
        pos.setflags(write=False)
        if not np.all(np.isfinite(pos)):
            raise ValueError("light position must be finite")
        if not (math.isfinite(self.intensity) and self.intensity >= 0):
            raise ValueError("light intensity must be finite and >= 0")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "intensity", float(self.intensity))


@dataclass(frozen=True, eq=False)
class LightParams:
    lights: tuple = ()
    ambient: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "lights", tuple(self.lights))
        if not (math.isfinite(self.ambient) and self.ambient >= 0):
            raise ValueError("ambient illumination must be finite and >= 0")

    @classmethod
    def single(cls, position, intensity=0.5, ambient=0.5):
        return cls((PointLight(position, intensity),), ambient)

    def positions(self):
        return np.array([l.position for l in self.lights]).reshape(-1, 3)

    def intensities(self):
        return np.array([l.intensity for l in self.lights], dtype=float)

    def scaled(self, c):
        """Same lights with every intensity and the ambient term multiplied by ``c``."""
        return LightParams(tuple(PointLight(l.position, c * l.intensity) for l in self.lights),
                           c * self.ambient)

    def to_dict(self):
        return {"lights": [{"position": l.position.tolist(), "intensity": l.intensity}
                           for l in self.lights],
                "ambient": self.ambient}

    @classmethod
    def from_dict(cls, doc):
        return cls(tuple(PointLight(d["position"], d.get("intensity", 0.5)) for d in doc["lights"]),
                   doc.get("ambient", 0.5))


@dataclass(frozen=True, eq=False)
class Image:
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        m = np.array(self.mask, dtype=bool)
        if v.shape != m.shape:
            raise ValueError("image values and mask must have the same shape")
        if not np.all(np.isfinite(v[m])) or np.any(v[m] < 0):
            raise ValueError("valid image intensities must be finite and >= 0")
        v[~m] = 0.0
        v.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)

    @property
    def shape(self):
        return self.values.shape

    def to_array(self):
        """Values with NaN at invalid pixels (the on-disk convention)."""
        return np.where(self.mask, self.values, np.nan)

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64)
        mask = np.isfinite(a)
        return cls(np.where(mask, a, 0.0), mask)


@dataclass(frozen=True)
class ShadowConfig:
    """Cube shadow-map parameters.

    ``bias=None`` means ``bias_fraction`` times the scene diagonal. On top of
    that constant each receiver adds ``slope_bias * r * cot(g)``, where ``r`` is
    its splat radius and ``g`` the grazing angle between the light ray and the
    surface (``cot(g)`` capped at ``max_slope``). Light-facing splats of
    neighbouring points on the same surface sit up to that much nearer the
    light, so the slope term keeps them from shadowing each other.
    """

    resolution: int = 256
    splat: int = 3
    bias: float | None = None
    bias_fraction: float = 0.02
    slope_bias: float = 1.0
    max_slope: float = 10.0

    def __post_init__(self):
        if self.resolution < 16:
            raise ValueError("shadow map resolution must be >= 16")
        if self.splat < 1:
            raise ValueError("splat size must be >= 1")
        if self.bias is not None and self.bias < 0:
            raise ValueError("shadow bias must be >= 0")
        if self.slope_bias < 0 or self.max_slope < 0:
            raise ValueError("slope bias parameters must be >= 0")

    def resolve_bias(self, cloud: OrientedPointCloud) -> float:
        if self.bias is not None:
            return float(self.bias)
        return self.bias_fraction * cloud.diagonal()


@dataclass(frozen=True, eq=False)
class ShadowMap:
    light: np.ndarray
    faces: np.ndarray  # (6, R, R) minimum distance to the light, +inf where empty
    bias: float
    splat: int
    slope_bias: float = 0.0
    max_slope: float = 10.0

    @property
    def resolution(self):
        return self.faces.shape[1]


@dataclass(frozen=True, eq=False)
class ShadowBuffer:
    """Binary visibility per light, shape ``(n_lights, H, W)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("shadow terms must be exactly 0 or 1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def lit(cls, n_lights, shape):
        return cls(np.ones((n_lights,) + tuple(shape)))


@dataclass(frozen=True, eq=False)
class ShadingFrame:
    omega_l: np.ndarray
    omega_v: np.ndarray
    half: np.ndarray
    half_norm: np.ndarray   # |omega_l + omega_v| before normalisation
    ndotl_raw: np.ndarray
    ndotl: np.ndarray       # max(0, omega_l . N)
    ndoth: np.ndarray       # max(0, H . N)
    dist: np.ndarray        # |L - X|
    mask: np.ndarray = field(repr=False)


def _unit(v):
    n = np.linalg.norm(v, axis=-1)
    return v / np.where(n > 0, n, 1.0)[..., None], n


def build_shading_frame(scene: Scene, light: PointLight) -> ShadingFrame:
    X = scene.cloud.points
    N = scene.cloud.normals
    omega_l, dist = _unit(light.position - X)
    omega_v, vdist = _unit(scene.camera.center - X)
    half, half_norm = _unit(omega_l + omega_v)
    mask = scene.cloud.mask & (dist > EPS_DIST) & (vdist > EPS_DIST) & (half_norm > EPS_DIST)
    ndotl_raw = np.einsum("hwk,hwk->hw", omega_l, N)
    ndoth = np.einsum("hwk,hwk->hw", half, N)
    zero = ~mask
    ndotl_raw[zero] = 0.0
    ndoth[zero] = 0.0
    return ShadingFrame(omega_l, omega_v, half, half_norm, ndotl_raw,
                        np.clip(ndotl_raw, 0.0, 1.0), np.clip(ndoth, 0.0, 1.0), dist, mask)


# --- cube shadow maps ---------------------------------------------------------

def cube_lookup(directions, resolution):
    """Face index and texel coordinates for direction vectors ``(n, 3)``.

    Faces are ordered +x, -x, +y, -y, +z, -z; on each face the texel grid
    spans the tangent square [-1, 1]^2 of the two minor axes. Returns
    ``(face, i, j, su, sv, major)``.
    """
    d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    n = len(d)
    face, i, j = (np.empty(n, np.int64) for _ in range(3))
    su, sv, major = (np.empty(n) for _ in range(3))
    _cube_kernel(d, resolution, face, i, j, su, sv, major)
    return face, i, j, su, sv, major


@numba.njit(cache=True)
def _cube_kernel(d, r, face, i, j, su, sv, major):
    for p in range(d.shape[0]):
        axis = 0
        m = abs(d[p, 0])
        for k in (1, 2):
            if abs(d[p, k]) > m:
                axis = k
                m = abs(d[p, k])
        face[p] = 2 * axis + (1 if d[p, axis] < 0 else 0)
        u = d[p, (axis + 1) % 3] / m
        v = d[p, (axis + 2) % 3] / m
        su[p] = u
        sv[p] = v
        major[p] = m
        i[p] = min(max(int(np.floor((u + 1.0) * 0.5 * r)), 0), r - 1)
        j[p] = min(max(int(np.floor((v + 1.0) * 0.5 * r)), 0), r - 1)


def splat_half_angle(su, sv, resolution, splat):
    """Angular radius of a splat: half of ``splat`` texels at the local texel size.

    A texel spans ``2/R`` tangent units; at tangent coordinates ``(u, v)`` the
    gnomonic projection shrinks that by ``(1 + u^2 + v^2)^(-3/4)`` on average.
    """
    return 0.5 * splat * (2.0 / resolution) * (1.0 + su * su + sv * sv) ** -0.75



@numba.njit(cache=True)
def _splat(unit, dist, cos_lim, r, reach, margin, buf):
    # Sequential min-reduction: the stored value never depends on point order.
    texel = 2.0 / r
    for p in range(unit.shape[0]):
        for f in range(6):
            axis = f // 2
            sgn = -1.0 if f % 2 else 1.0
            major = unit[p, axis] * sgn
            if major <= 0.0:
                continue
            b = (axis + 1) % 3
            c = (axis + 2) % 3
            su = unit[p, b] / major
            sv = unit[p, c] / major
            if abs(su) > 1.0 + margin or abs(sv) > 1.0 + margin:
                continue
            i0 = int(np.floor((su + 1.0) * 0.5 * r))
            j0 = int(np.floor((sv + 1.0) * 0.5 * r))
            for i in range(max(i0 - reach, 0), min(i0 + reach + 1, r)):
                tu = (i + 0.5) * texel - 1.0
                for j in range(max(j0 - reach, 0), min(j0 + reach + 1, r)):
                    tv = (j + 0.5) * texel - 1.0
                    cosang = (major + unit[p, b] * tu + unit[p, c] * tv) / np.sqrt(1.0 + tu * tu + tv * tv)
                    if cosang >= cos_lim[p] and dist[p] < buf[f, i, j]:
                        buf[f, i, j] = dist[p]


def render_shadow_map(cloud: OrientedPointCloud, light: PointLight | np.ndarray,
                      cfg: ShadowConfig = ShadowConfig()) -> ShadowMap:
    """Splat every valid point into the light's cube map, keeping minimum distances.

    Each point covers the texels whose centre directions lie within its splat
    half-angle, on whichever faces those texels sit.
    """
    pos = light.position if isinstance(light, PointLight) else np.asarray(light, float)
    pts = cloud.valid_points()
    if len(pts) == 0:
        raise ValueError("cannot render a shadow map from an empty point cloud")
    d = pts - pos
    dist = np.linalg.norm(d, axis=1)
    if dist.min() < EPS_DIST:
        raise ValueError("light position coincides with a scene point")
    r = cfg.resolution
    _, _, _, su0, sv0, _ = cube_lookup(d, r)
    cos_lim = np.cos(splat_half_angle(su0, sv0, r, cfg.splat))
    unit = d / dist[:, None]
    # a disc at tangent radius rho spans (s/2) (1 + rho^2)^(1/4) texels; a face
    # takes points up to ``margin`` past its edge, so rho^2 <= 2 (1 + margin)^2
    ext = 0.5 * cfg.splat * 3.0 ** 0.25
    for _ in range(4):
        margin = 2.0 * (ext + 1.0) / r
        ext = 0.5 * cfg.splat * (1.0 + 2.0 * (1.0 + margin) ** 2) ** 0.25
    margin = 2.0 * (ext + 1.0) / r
    buf = np.full((6, r, r), np.inf)
    _splat(unit, dist, cos_lim, r, int(np.floor(ext + 0.5)), margin, buf)
    buf.setflags(write=False)
    return ShadowMap(pos.copy(), buf, cfg.resolve_bias(cloud), cfg.splat, cfg.slope_bias, cfg.max_slope)


def _slope_bias(dist, su, sv, sin_g, resolution, splat, bias, slope_bias, max_slope):
    if slope_bias == 0:
        return np.full(len(dist), float(bias))
    radius = dist * np.sin(splat_half_angle(su, sv, resolution, splat))
    cot_g = np.sqrt(np.maximum(1.0 - sin_g * sin_g, 0.0)) / np.maximum(sin_g, 1e-12)
    return bias + slope_bias * radius * np.minimum(cot_g, max_slope)


def receiver_bias(offsets, normals, resolution, splat, bias, slope_bias, max_slope):
    """Per-receiver depth bias for point-minus-light ``offsets`` and unit ``normals``."""
    dist = np.linalg.norm(offsets, axis=1)
    _, _, _, su, sv, _ = cube_lookup(offsets, resolution)
    sin_g = np.abs(np.einsum("ij,ij->i", offsets, normals)) / dist
    return _slope_bias(dist, su, sv, sin_g, resolution, splat, bias, slope_bias, max_slope)


def shadow_term(smap: ShadowMap, cloud: OrientedPointCloud) -> np.ndarray:
    """Binary visibility ``(H, W)``: 0 where the point lies beyond the stored depth plus bias."""
    S = np.ones(cloud.shape)
    pts = cloud.valid_points()
    if len(pts) == 0:
        return S
    d = pts - smap.light
    dist = np.sqrt(np.einsum("ij,ij->i", d, d))
    face, i, j, su, sv, _ = cube_lookup(d, smap.resolution)
    stored = smap.faces[face, i, j]
    sin_g = np.abs(np.einsum("ij,ij->i", d, cloud.valid_normals())) / dist
    b = _slope_bias(dist, su, sv, sin_g, smap.resolution, smap.splat, smap.bias,
                    smap.slope_bias, smap.max_slope)
    S[cloud.mask] = np.where(dist > stored + b, 0.0, 1.0)
    return S


def shadow_buffer(scene: Scene, lights: LightParams, cfg: ShadowConfig = ShadowConfig()) -> ShadowBuffer:
    return ShadowBuffer(np.stack([shadow_term(render_shadow_map(scene.cloud, l, cfg), scene.cloud)
                                  for l in lights.lights]) if lights.lights
                        else np.ones((0,) + scene.shape))


# --- shading ------------------------------------------------------------------

def direct_terms(scene: Scene, frame: ShadingFrame, specular: bool = True):
    """Unshadowed, unit-intensity diffuse and specular terms for one light.

    The specular lobe is gated off where the light is behind the surface.
    """
    m = scene.materials
    diffuse = m.kd * frame.ndotl
    if not specular:
        return diffuse, np.zeros_like(diffuse)
    spec = m.ks * np.power(frame.ndoth, m.alpha) * (frame.ndotl_raw > 0)
    return diffuse, spec


def shade(scene: Scene, lights: LightParams, shadows: ShadowBuffer | None = None,
          specular: bool = True, frames=None) -> Image:
    """Evaluate ``I = kd*La + sum_i S_i * I_L,i * (kd*max(0, w_l.N) + ks*max(0, H.N)^alpha)``."""
    if shadows is None:
        shadows = ShadowBuffer.lit(len(lights.lights), scene.shape)
    if frames is None:
        frames = [build_shading_frame(scene, l) for l in lights.lights]
    mask = scene.cloud.mask.copy()
    I = scene.materials.kd * lights.ambient
    for light, frame, S in zip(lights.lights, frames, shadows.values):
        diffuse, spec = direct_terms(scene, frame, specular)
        I = I + S * light.intensity * (diffuse + spec)
        mask &= frame.mask
    I = np.maximum(I, 0.0)
    return Image(np.where(mask, I, 0.0), mask)


def render(scene: Scene, lights: LightParams, cfg: ShadowConfig = ShadowConfig(),
           shadows: bool = True, specular: bool = True) -> tuple[Image, ShadowBuffer]:
    """Shadow maps per light, then shadow terms, then shading.

    ``shadows=False`` forces S = 1 everywhere (the shadowless baselines).
    """
    buf = shadow_buffer(scene, lights, cfg) if shadows else ShadowBuffer.lit(len(lights.lights), scene.shape)
    return shade(scene, lights, buf, specular=specular), buf
