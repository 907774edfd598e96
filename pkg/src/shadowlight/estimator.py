"""Gradient-descent light estimation.

The scene is first mapped to a unit box, so the fixed learning rate means the
same thing for every input scale. Descent runs in those normalized
coordinates and the result is mapped back.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gradients import ModelKind, energy, energy_and_gradient
from .renderer import Image, LightParams, PointLight, ShadowConfig
from .scene import Scene, SimilarityTransform, normalize_scene

__all__ = ["OptimizerOptions", "EstimateResult", "TraceEntry", "DivergenceError", "EstimationError",
           "estimate_light", "energy", "write_result", "write_trace_csv", "write_gradient_csv"]

# Points closer than this to the light count as "the light is on the surface".
SURFACE_EPS = 1e-6


class EstimationError(ValueError):
    """Invalid input to the estimator (bad init, misaligned target, no valid pixels)."""


class DivergenceError(RuntimeError):
    def __init__(self, iteration, message="energy became non-finite"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class OptimizerOptions:
    """Plain fixed-rate gradient descent settings.

    ``energy_scale`` fixes how the summed squared error is weighted before
    differentiation: ``"pixels"`` divides it by the number of valid pixels and
    multiplies by ``reference_pixels``; ``"sum"`` uses the raw sum. The
    reported energies are always the raw sum.
    """
    rate: float = 0.02
    tolerance: float = 1e-4
    max_iter: int = 1000
    shadow_step: float | None = None      # FD step h in normalized units; None -> 1% of diagonal
    free_intensity: bool = False
    free_ambient: bool = False
    energy_scale: str = "pixels"
    reference_pixels: float = 25.0
    energy_floor: float = 1e-13           # per valid pixel; below it the fit counts as exact

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("learning rate must be > 0")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.shadow_step is not None and not self.shadow_step > 0:
            raise ValueError("shadow FD step must be > 0")
        if self.energy_scale not in ("pixels", "sum"):
            raise ValueError("energy_scale must be 'pixels' or 'sum'")
        if not self.reference_pixels > 0:
            raise ValueError("reference_pixels must be > 0")
        if not self.energy_floor >= 0:
            raise ValueError("energy_floor must be >= 0")

    def weight(self, n_valid: int) -> float:
        if self.energy_scale == "sum":
            return 1.0
        return self.reference_pixels / n_valid

    def to_dict(self):
        return dict(rate=self.rate, tolerance=self.tolerance, max_iter=self.max_iter,
                    shadow_step=self.shadow_step, free_intensity=self.free_intensity,
                    free_ambient=self.free_ambient, energy_scale=self.energy_scale,
                    reference_pixels=self.reference_pixels, energy_floor=self.energy_floor)

    @classmethod
    def from_dict(cls, doc):
        return cls(**{k: v for k, v in doc.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class TraceEntry:
    energy: float
    position: tuple          # first light, input scene units
    grad_norm: float         # in normalized units
    gradient: tuple = ()     # dE/d(x, y, z, intensity, ambient) of the first light, raw-sum scale


@dataclass(frozen=True)
class EstimateResult:
    lights: LightParams                   # input scene units
    normalized_lights: LightParams        # unit-box units
    trace: tuple
    iterations: int
    reason: str                           # "converged" | "max-iter"
    transform: SimilarityTransform
    model: ModelKind
    seconds: float = 0.0

    @property
    def energy(self):
        return self.trace[-1].energy

    @property
    def position(self):
        return self.lights.lights[0].position

    def to_dict(self):
        return {
            "model": self.model.value,
            "reason": self.reason,
            "iterations": self.iterations,
            "energy": self.energy,
            "seconds": self.seconds,
            "lights": self.lights.to_dict(),
            "normalized_lights": self.normalized_lights.to_dict(),
            "transform": {"scale": self.transform.scale, "translation": list(self.transform.translation)},
            "trace": [{"iteration": i, "energy": t.energy, "position": list(t.position),
                       "grad_norm": t.grad_norm} for i, t in enumerate(self.trace)],
        }


def _check_init(scene: Scene, init: LightParams):
    pts = scene.cloud.valid_points()
    for light in init.lights:
        p = light.position
        if not np.all(np.isfinite(p)):
            raise EstimationError("initial light position must be finite")
        if len(pts) and np.min(np.linalg.norm(pts - p, axis=1)) < SURFACE_EPS * max(1.0, scene.cloud.diagonal()):
            raise EstimationError("initial light position lies on the scene surface")


def _to_frame(lights: LightParams, f) -> LightParams:
    return LightParams(tuple(PointLight(f(l.position), l.intensity) for l in lights.lights), lights.ambient)


def estimate_light(scene: Scene, target: Image, init: LightParams,
                   model: ModelKind = ModelKind.FULL_SHADOWS,
                   opts: OptimizerOptions = OptimizerOptions(),
                   shadow_cfg: ShadowConfig = ShadowConfig()) -> EstimateResult:
    """Minimize the photometric error over the light position(s).

    Each iteration renders the model, takes ``L <- L - rate * dE/dL`` and stops
    once ``|E_t - E_{t-1}| / E_{t-1} < tolerance`` or ``E_{t-1}`` is at most
    ``energy_floor`` per valid pixel (a float32 target never fits exactly). The
    trace holds the state before every step plus the final state.
    """
    if target.shape != scene.shape:
        raise EstimationError(f"target shape {target.shape} does not match scene {scene.shape}")
    valid = scene.cloud.mask & target.mask
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EstimationError("scene and target have no valid pixels in common")
    _check_init(scene, init)

    t0 = time.perf_counter()
    nscene, tf = normalize_scene(scene)
    lights = start = _to_frame(init, tf.apply)
    w = opts.weight(n_valid)

    def evaluate(lp):
        return energy_and_gradient(nscene, lp, target, model, shadow_cfg, opts.shadow_step, weight=w)

    def record(eg, lp):
        E = eg.energy / w
        if not math.isfinite(E) or not np.all(np.isfinite(eg.grad_positions)):
            raise DivergenceError(len(trace))
        g = (*eg.grad_positions[0], eg.grad_intensities[0], eg.grad_ambient)
        trace.append(TraceEntry(E, tuple(float(x) for x in tf.inverse(lp.lights[0].position)),
                                eg.norm(opts.free_intensity, opts.free_ambient) / w,
                                tuple(float(x) / w for x in g)))
        return E

    trace: list[TraceEntry] = []
    eg = evaluate(lights)
    prev = record(eg, lights)
    reason, it = "max-iter", 0
    while it < opts.max_iter:
        new = []
        for i, l in enumerate(lights.lights):
            with np.errstate(over="ignore", invalid="ignore"):
                pos = l.position - opts.rate * eg.grad_positions[i]
                inten = l.intensity - opts.rate * eg.grad_intensities[i] if opts.free_intensity else l.intensity
            if not np.all(np.isfinite(pos)) or not math.isfinite(inten):
                raise DivergenceError(it + 1, "light parameters became non-finite")
            new.append(PointLight(pos, max(inten, 0.0)))
        amb = lights.ambient - opts.rate * eg.grad_ambient if opts.free_ambient else lights.ambient
        before, lights = lights, LightParams(tuple(new), max(amb, 0.0))
        it += 1
        try:
            eg = evaluate(lights)
        except ValueError as exc:
            raise DivergenceError(it, str(exc)) from exc
        E = record(eg, lights)
        if prev <= opts.energy_floor * n_valid:
            # already an exact fit: keep it rather than a rounding-noise step away
            lights = before
            trace[-1] = trace[-2]
            reason = "converged"
            break
        if abs(E - prev) / prev < opts.tolerance:
            reason = "converged"
            break
        prev = E

    # a zero step must hand back the init bit for bit, not its round trip through the frame
    unmoved = lights.ambient == start.ambient and all(
        np.array_equal(a.position, b.position) and a.intensity == b.intensity
        for a, b in zip(lights.lights, start.lights))
    out = init if unmoved else _to_frame(lights, tf.inverse)
    return EstimateResult(out, lights, tuple(trace), it, reason, tf, model,
                          time.perf_counter() - t0)


def trace_csv(result: EstimateResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "E", "Lx", "Ly", "Lz", "grad_norm"])
    for i, t in enumerate(result.trace):
        w.writerow([i, repr(t.energy), *(repr(x) for x in t.position), repr(t.grad_norm)])
    return buf.getvalue()


def _atomic_write(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_result(result: EstimateResult, path):
    _atomic_write(path, json.dumps(result.to_dict(), indent=2) + "\n")


def write_trace_csv(result: EstimateResult, path):
    _atomic_write(path, trace_csv(result))


def gradient_csv(result: EstimateResult) -> str:
    """Per-iteration gradient components in normalized scene units."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "dE_dx", "dE_dy", "dE_dz", "dE_dintensity", "dE_dambient"])
    for i, t in enumerate(result.trace):
        w.writerow([i, *(repr(x) for x in t.gradient)])
    return buf.getvalue()


def write_gradient_csv(result: EstimateResult, path):
    _atomic_write(path, gradient_csv(result))
