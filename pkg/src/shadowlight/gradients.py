"""Per-pixel Jacobians of the rendered image w.r.t. light parameters.

Diffuse and specular terms have closed-form derivatives. The shadow term is
a step function of the light position, so its Jacobian is estimated by
central differences over six shadow maps rendered at ``L +/- h e_k``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .renderer import (Image, LightParams, PointLight, ShadingFrame, ShadowBuffer, ShadowConfig,
                       build_shading_frame, direct_terms, render_shadow_map, shade, shadow_buffer,
                       shadow_term)
from .scene import Scene


class ModelKind(enum.Enum):
    DIFFUSE_AMBIENT = "diffuse"      # ambient + Lambert, no shadows
    DIFFUSE_SPECULAR = "specular"    # ambient + Blinn-Phong, no shadows
    FULL_SHADOWS = "full"            # ambient + Blinn-Phong + cast shadows

    @property
    def specular(self):
        return self is not ModelKind.DIFFUSE_AMBIENT

    @property
    def shadows(self):
        return self is ModelKind.FULL_SHADOWS

    @classmethod
    def parse(cls, name):
        try:
            return cls(name)
        except ValueError:
            try:
                return cls[name.upper()]
            except KeyError:
                valid = ", ".join(m.value for m in cls)
                raise ValueError(f"unknown model '{name}'; valid models: {valid}") from None


@dataclass(frozen=True, eq=False)
class PixelJacobian:
    d_pos: np.ndarray        # (H, W, 3) dI/dL_pos
    d_intensity: np.ndarray  # (H, W) dI/dI_L
    mask: np.ndarray

    def __add__(self, other):
        if self.d_pos.shape != other.d_pos.shape:
            raise ValueError("cannot add Jacobians of different dimensions")
        return PixelJacobian(self.d_pos + other.d_pos, self.d_intensity + other.d_intensity,
                             self.mask & other.mask)

    @classmethod
    def zeros(cls, shape, mask=None):
        return cls(np.zeros(tuple(shape) + (3,)), np.zeros(shape),
                   np.ones(shape, bool) if mask is None else mask)


@dataclass(frozen=True, eq=False)
class EnergyGradient:
    energy: float
    grad_positions: np.ndarray     # (n_lights, 3)
    grad_intensities: np.ndarray   # (n_lights,)
    grad_ambient: float
    image: Image | None = None
    residual_mask: np.ndarray | None = None

    def norm(self, free_intensity=False, free_ambient=False):
        sq = float(np.sum(self.grad_positions ** 2))
        if free_intensity:
            sq += float(np.sum(self.grad_intensities ** 2))
        if free_ambient:
            sq += self.grad_ambient ** 2
        return sq ** 0.5


def _shadow_values(shadows, shape):
    if shadows is None:
        return np.ones(shape)
    if isinstance(shadows, ShadowBuffer):
        return shadows.values[0]
    return np.asarray(shadows, float)


def grad_diffuse(scene: Scene, light: PointLight, frame: ShadingFrame, shadows=None) -> PixelJacobian:
    """``kd * I_L * S * N^T (Id - w w^T) / |L - X|`` where the diffuse dot is positive."""
    S = _shadow_values(shadows, scene.shape)
    kd = scene.materials.kd
    N = scene.cloud.normals
    w = frame.omega_l
    active = frame.mask & (frame.ndotl_raw > 0) & (S > 0)
    coef = np.where(active, kd * light.intensity * S / np.where(active, frame.dist, 1.0), 0.0)
    d_pos = coef[..., None] * (N - frame.ndotl_raw[..., None] * w)
    d_int = np.where(active, S * kd * frame.ndotl, 0.0)
    return PixelJacobian(d_pos, d_int, frame.mask)


def grad_specular(scene: Scene, light: PointLight, frame: ShadingFrame, shadows=None) -> PixelJacobian:
    """``ks * I_L * S * alpha (H.N)^(alpha-1) N^T dH/dL`` with
    ``dH/dL = (Id - H H^T)/|w_l + w_v| (Id - w w^T)/|L - X|``."""
    S = _shadow_values(shadows, scene.shape)
    m = scene.materials
    N = scene.cloud.normals
    w, H = frame.omega_l, frame.half
    active = frame.mask & (frame.ndotl_raw > 0) & (frame.ndoth > 0) & (S > 0) & (m.ks > 0)
    hn = np.where(active, frame.half_norm, 1.0)
    dist = np.where(active, frame.dist, 1.0)
    a = (N - frame.ndoth[..., None] * H) / hn[..., None]
    b = (a - np.einsum("hwk,hwk->hw", w, a)[..., None] * w) / dist[..., None]
    coef = np.where(active, m.ks * light.intensity * S * m.alpha
                    * np.power(frame.ndoth, m.alpha - 1.0), 0.0)
    d_pos = coef[..., None] * b
    spec = np.where(frame.mask & (frame.ndotl_raw > 0), m.ks * np.power(frame.ndoth, m.alpha), 0.0)
    return PixelJacobian(d_pos, S * spec, frame.mask)


def grad_intensity(scene: Scene, frame: ShadingFrame, shadows=None, specular: bool = True) -> np.ndarray:
    """``dI/dI_L = S (kd max(0, w.N) + ks max(0, H.N)^alpha)``; exact since the model is linear in I_L."""
    S = _shadow_values(shadows, scene.shape)
    diffuse, spec = direct_terms(scene, frame, specular)
    return np.where(frame.mask, S * (diffuse + spec), 0.0)


def grad_shadow_fd(scene: Scene, light: PointLight, cfg: ShadowConfig = ShadowConfig(),
                   h: float | None = None, step_fraction: float = 0.01) -> PixelJacobian:
    """Central-difference ``dS/dL`` from six shadow maps at ``L +/- h e_k``.

    ``h`` defaults to ``step_fraction`` times the scene diagonal. Each entry is
    exactly one of ``-1/(2h)``, ``0`` or ``1/(2h)``.
    """
    if h is None:
        h = step_fraction * scene.cloud.diagonal()
    if not h > 0:
        raise ValueError("finite-difference step h must be > 0")
    d_pos = np.zeros(scene.shape + (3,))
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        plus = shadow_term(render_shadow_map(scene.cloud, light.position + e, cfg), scene.cloud)
        minus = shadow_term(render_shadow_map(scene.cloud, light.position - e, cfg), scene.cloud)
        d_pos[..., k] = (plus - minus) / (2.0 * h)
    return PixelJacobian(d_pos, np.zeros(scene.shape), scene.cloud.mask)


def assemble_image_jacobian(diffuse: PixelJacobian, specular: PixelJacobian | None = None,
                            shadow: PixelJacobian | None = None,
                            unshadowed=None) -> PixelJacobian:
    """Chain rule: ``dI/dL = dI_d/dL + dI_s/dL + (I_d + I_s) dS/dL``.

    The first two parts already carry the current S as a gate; ``unshadowed``
    is the per-pixel ``I_d + I_s`` without the shadow factor.
    """
    total = diffuse if specular is None else diffuse + specular
    if shadow is None:
        return total
    if shadow.d_pos.shape != total.d_pos.shape:
        raise ValueError("shadow Jacobian dimensions do not match")
    if unshadowed is None:
        raise ValueError("the shadow part needs the unshadowed direct intensity")
    return PixelJacobian(total.d_pos + np.asarray(unshadowed)[..., None] * shadow.d_pos,
                         total.d_intensity, total.mask & shadow.mask)


def light_jacobian(scene: Scene, light: PointLight, frame: ShadingFrame, S, model: ModelKind,
                   cfg: ShadowConfig, h: float | None = None) -> PixelJacobian:
    diff = grad_diffuse(scene, light, frame, S)
    spec = grad_specular(scene, light, frame, S) if model.specular else None
    if not model.shadows:
        return assemble_image_jacobian(diff, spec)
    d, s = direct_terms(scene, frame, model.specular)
    shadow = grad_shadow_fd(scene, light, cfg, h)
    return assemble_image_jacobian(diff, spec, shadow, light.intensity * (d + s))


def energy(image: Image, target: Image) -> float:
    """Sum of squared differences over the pixels valid in both images."""
    if image.shape != target.shape:
        raise ValueError(f"image shape {image.shape} does not match target {target.shape}")
    m = image.mask & target.mask
    if not m.any():
        raise ValueError("rendered and target images have no valid pixels in common")
    r = image.values[m] - target.values[m]
    return float(np.sum(r * r))


def render_model(scene: Scene, lights: LightParams, model: ModelKind,
                 cfg: ShadowConfig = ShadowConfig()):
    """Forward render under a model variant; returns ``(image, shadows, frames)``."""
    frames = [build_shading_frame(scene, l) for l in lights.lights]
    if model.shadows:
        buf = shadow_buffer(scene, lights, cfg)
    else:
        buf = ShadowBuffer.lit(len(lights.lights), scene.shape)
    return shade(scene, lights, buf, specular=model.specular, frames=frames), buf, frames


def energy_and_gradient(scene: Scene, lights: LightParams, target: Image,
                        model: ModelKind = ModelKind.FULL_SHADOWS,
                        cfg: ShadowConfig = ShadowConfig(), h: float | None = None,
                        weight: float = 1.0) -> EnergyGradient:
    """``E = weight * sum (I - I*)^2`` and ``dE/dL = 2 weight (I - I*)^T dI/dL``.

    For the shadowless models S is fixed to 1 in both the forward pass and the
    Jacobian, and DIFFUSE_AMBIENT drops the specular term altogether.
    """
    image, buf, frames = render_model(scene, lights, model, cfg)
    if image.shape != target.shape:
        raise ValueError(f"target shape {target.shape} does not match scene {image.shape}")
    m = image.mask & target.mask
    if not m.any():
        raise ValueError("rendered and target images have no valid pixels in common")
    r = np.where(m, image.values - target.values, 0.0)
    E = weight * float(np.sum(r[m] * r[m]))
    r2 = 2.0 * weight * r

    g_pos = np.zeros((len(lights.lights), 3))
    g_int = np.zeros(len(lights.lights))
    for i, (light, frame) in enumerate(zip(lights.lights, frames)):
        J = light_jacobian(scene, light, frame, buf.values[i], model, cfg, h)
        g_pos[i] = [float(np.sum(r2[m] * J.d_pos[..., k][m])) for k in range(3)]
        g_int[i] = float(np.sum(r2[m] * J.d_intensity[m]))
    g_amb = float(np.sum(r2[m] * scene.materials.kd[m]))
    return EnergyGradient(E, g_pos, g_int, g_amb, image, m)


# --- finite-difference checks ------------------------------------------------------------

@dataclass(frozen=True)
class TermCheck:
    """Worst relative error of one analytic term against central differences."""
    name: str
    max_rel_error: float
    checked: int
    worst_pixel: tuple | None = None
    worst_detail: dict | None = None

    def passed(self, tol=1e-4):
        return self.checked > 0 and self.max_rel_error < tol


def _term_values(scene, light, specular):
    frame = build_shading_frame(scene, light)
    diffuse, spec = direct_terms(scene, frame, specular)
    return frame, light.intensity * diffuse, light.intensity * spec


def _raw_ndoth(scene, frame):
    return np.einsum("hwk,hwk->hw", frame.half, scene.cloud.normals)


def check_shading_gradients(scene: Scene, light: PointLight, step: float = 1e-5,
                            dot_margin: float = 1e-3, floor: float = 1e-8):
    """Analytic diffuse and specular position Jacobians vs central differences.

    Pixels where a clamped dot product lies within ``dot_margin`` of zero are
    skipped, because the central difference would straddle the kink. The error
    per pixel is ``|a - f| / max(|a|, |f|, floor)``.
    """
    frame, _, _ = _term_values(scene, light, True)
    fd_d = np.zeros(scene.shape + (3,))
    fd_s = np.zeros(scene.shape + (3,))
    for k in range(3):
        e = np.zeros(3)
        e[k] = step
        _, dp, sp = _term_values(scene, PointLight(light.position + e, light.intensity), True)
        _, dm, sm = _term_values(scene, PointLight(light.position - e, light.intensity), True)
        fd_d[..., k] = (dp - dm) / (2 * step)
        fd_s[..., k] = (sp - sm) / (2 * step)
    an_d = grad_diffuse(scene, light, frame).d_pos
    an_s = grad_specular(scene, light, frame).d_pos
    ndoth = _raw_ndoth(scene, frame)
    usable = frame.mask & (np.abs(frame.ndotl_raw) > dot_margin)
    out = []
    for name, an, fd, ok in (("diffuse", an_d, fd_d, usable),
                             ("specular", an_s, fd_s, usable & (np.abs(ndoth) > dot_margin))):
        err = np.linalg.norm(an - fd, axis=-1) / np.maximum(
            np.maximum(np.linalg.norm(an, axis=-1), np.linalg.norm(fd, axis=-1)), floor)
        err = np.where(ok, err, -1.0)
        if not ok.any():
            out.append(TermCheck(name, float("nan"), 0))
            continue
        worst = np.unravel_index(int(np.argmax(err)), err.shape)
        detail = {"point": scene.cloud.points[worst].tolist(), "normal": scene.cloud.normals[worst].tolist(),
                  "analytic": an[worst].tolist(), "finite_difference": fd[worst].tolist(),
                  "n_dot_l": float(frame.ndotl_raw[worst]), "n_dot_h": float(ndoth[worst])}
        out.append(TermCheck(name, float(err[worst]), int(ok.sum()), tuple(int(i) for i in worst), detail))
    return tuple(out)


def check_shadow_directional(scene: Scene, light: PointLight, cfg: ShadowConfig = ShadowConfig(),
                             h: float | None = None, direction=None, specular: bool = True):
    """Compare the assembled Jacobian along ``direction`` with a direct central difference.

    Both sides are summed over the image: ``sum_p (dI_p/dL) v`` against
    ``sum_p (I_p(L + h v) - I_p(L - h v)) / (2h)``. Returns the relative error.
    """
    if h is None:
        h = 0.01 * scene.cloud.diagonal()
    v = np.asarray(direction if direction is not None else (1.0, 0.0, 0.0), float)
    v = v / np.linalg.norm(v)
    model = ModelKind.FULL_SHADOWS if specular else ModelKind.DIFFUSE_AMBIENT
    lights = LightParams((light,), 0.0)
    frame = build_shading_frame(scene, light)
    buf = shadow_buffer(scene, lights, cfg)
    J = light_jacobian(scene, light, frame, buf.values[0], model, cfg, h)
    m = scene.cloud.mask
    analytic = float(np.sum((J.d_pos @ v)[m]))

    def image_at(p):
        lp = LightParams((PointLight(p, light.intensity),), 0.0)
        return shade(scene, lp, shadow_buffer(scene, lp, cfg), specular=specular).values

    fd = float(np.sum(((image_at(light.position + h * v) - image_at(light.position - h * v)) / (2 * h))[m]))
    denom = max(abs(analytic), abs(fd), 1e-12)
    return abs(analytic - fd) / denom, analytic, fd
