"""Procedural scenes, FBM reflectance noise and the robustness benchmark."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .renderer import LightParams, PointLight, ShadowConfig
from .scene import Camera, DepthMap, MaterialMaps, Scene, depth_to_cloud

PRESETS = ("plane-box", "plane-spheres", "steps")
GROUND_HALF = 1.0
MIN_SHADOW_COVERAGE = 0.05


# --- FBM value noise --------------------------------------------------------------

@dataclass(frozen=True)
class NoiseConfig:
    magnitude: float = 0.0
    seed: int = 0
    octaves: int = 4
    lacunarity: float = 2.0
    gain: float = 0.5
    base_frequency: float = 4.0

    def __post_init__(self):
        if self.magnitude < 0:
            raise ValueError("noise magnitude must be >= 0")
        if self.octaves < 1:
            raise ValueError("octaves must be >= 1")


def _fade(t):
    return t * t * (3.0 - 2.0 * t)


def value_noise(width, height, frequency, rng):
    """Smoothly interpolated lattice noise in [-1, 1] with ``frequency`` cells across the width."""
    cells_x = frequency
    cells_y = frequency * height / width
    gx, gy = int(math.ceil(cells_x)) + 2, int(math.ceil(cells_y)) + 2
    lattice = rng.uniform(-1.0, 1.0, size=(gy, gx))
    x = (np.arange(width) + 0.5) / width * cells_x
    y = (np.arange(height) + 0.5) / height * cells_y
    xi, yi = np.floor(x).astype(int), np.floor(y).astype(int)
    fx, fy = _fade(x - xi), _fade(y - yi)
    v00 = lattice[yi[:, None], xi[None, :]]
    v01 = lattice[yi[:, None], xi[None, :] + 1]
    v10 = lattice[yi[:, None] + 1, xi[None, :]]
    v11 = lattice[yi[:, None] + 1, xi[None, :] + 1]
    top = v00 + fx[None, :] * (v01 - v00)
    bot = v10 + fx[None, :] * (v11 - v10)
    return top + fy[:, None] * (bot - top)


def fbm_octaves(width, height, cfg: NoiseConfig):
    """The weighted octave layers ``gain**o * noise(freq * lacunarity**o)`` before summation."""
    rng = np.random.default_rng(cfg.seed)
    return [cfg.gain ** o * value_noise(width, height, cfg.base_frequency * cfg.lacunarity ** o, rng)
            for o in range(cfg.octaves)]


def fbm_noise(width, height, cfg: NoiseConfig):
    """Zero-mean FBM field rescaled so its maximum absolute value is ``cfg.magnitude``."""
    if cfg.magnitude == 0:
        return np.zeros((height, width))
    field = np.sum(fbm_octaves(width, height, cfg), axis=0)
    field -= field.mean()
    peak = np.abs(field).max()
    if peak == 0:
        return field
    return field * (cfg.magnitude / peak)


def perturb_materials(materials: MaterialMaps, cfg: NoiseConfig | None) -> MaterialMaps:
    """Corrupt the reflectance belief for one benchmark noise level.

    ``None`` is the ideal level (unchanged). Magnitude 0 replaces both maps by
    a uniform 0.5. Otherwise independent FBM fields are added to ``kd`` and
    ``ks`` and the result is clamped at zero. Shininess is never altered.
    """
    if cfg is None:
        return materials
    shape = materials.kd.shape
    if cfg.magnitude == 0:
        return MaterialMaps(np.full(shape, 0.5), np.full(shape, 0.5), materials.alpha)
    h, w = shape
    fd = fbm_noise(w, h, cfg)
    fs = fbm_noise(w, h, NoiseConfig(cfg.magnitude, cfg.seed + 7919, cfg.octaves,
                                     cfg.lacunarity, cfg.gain, cfg.base_frequency))
    return MaterialMaps(np.maximum(materials.kd + fd, 0.0), np.maximum(materials.ks + fs, 0.0),
                        materials.alpha)


# --- procedural scenes --------------------------------------------------------------

def _hit_plane(origin, dirs):
    t = np.full(len(dirs), np.inf)
    down = dirs[:, 2] < -1e-12
    t[down] = -origin[2] / dirs[down, 2]
    p = origin + t[:, None] * dirs
    inside = (np.abs(p[:, 0]) <= GROUND_HALF) & (np.abs(p[:, 1]) <= GROUND_HALF)
    t[~(down & inside)] = np.inf
    return t


def _hit_box(origin, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (np.asarray(lo) - origin) * inv
        t2 = (np.asarray(hi) - origin) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def _hit_sphere(origin, dirs, center, radius):
    oc = origin - np.asarray(center)
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2.0 * dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4 * a * c
    t = np.full(len(dirs), np.inf)
    ok = disc >= 0
    root = (-b[ok] - np.sqrt(disc[ok])) / (2 * a[ok])
    t[ok] = np.where(root > 0, root, np.inf)
    return t


def _preset_primitives(preset, rng):
    if preset == "plane-box":
        cx, cy = rng.uniform(-0.15, 0.15, size=2)
        sx, sy = rng.uniform(0.45, 0.6, size=2)
        sz = rng.uniform(0.4, 0.55)
        return [("box", (cx - sx / 2, cy - sy / 2, 0.0), (cx + sx / 2, cy + sy / 2, sz))]
    if preset == "plane-spheres":
        count = int(rng.integers(2, 4))
        prims = []
        anchors = [(-0.45, -0.2), (0.45, -0.1), (0.0, 0.45)]
        for k in range(count):
            r = rng.uniform(0.2, 0.3)
            ax, ay = anchors[k]
            jx, jy = rng.uniform(-0.08, 0.08, size=2)
            prims.append(("sphere", (ax + jx, ay + jy, r), r))
        return prims
    if preset == "steps":
        rise = rng.uniform(0.14, 0.18)
        run = rng.uniform(0.3, 0.36)
        y0 = rng.uniform(-0.6, -0.45)
        return [("box", (-0.7, y0 + k * run, 0.0), (0.7, GROUND_HALF, (k + 1) * rise))
                for k in range(3)]
    raise ValueError(f"unknown preset '{preset}'; valid presets: {', '.join(PRESETS)}")


def _raycast_depth(camera: Camera, prims):
    h, w = camera.height, camera.width
    vv, uu = np.mgrid[0:h, 0:w]
    rays = np.stack([(uu - camera.cx) / camera.fx, (vv - camera.cy) / camera.fy,
                     np.ones_like(uu, float)], axis=-1).reshape(-1, 3)
    dirs = rays @ camera.rotation.T
    origin = camera.center
    t = _hit_plane(origin, dirs)
    for prim in prims:
        if prim[0] == "box":
            t = np.minimum(t, _hit_box(origin, dirs, prim[1], prim[2]))
        else:
            t = np.minimum(t, _hit_sphere(origin, dirs, prim[1], prim[2]))
    # rays have unit z in the camera frame, so t is the z-depth
    depth = t.reshape(h, w)
    mask = np.isfinite(depth)
    return DepthMap(np.where(mask, depth, np.nan), mask)


def default_camera(width=64, height=64):
    return Camera.look_at((0.0, -1.75, 1.65), (0.0, 0.12, 0.1), (0.0, 0.0, 1.0), 48.0, width, height)


def _candidate_lights(rng, n=6):
    az0 = rng.uniform(0, 2 * math.pi)
    out = []
    for k in range(n):
        az = az0 + 2 * math.pi * k / n + rng.uniform(-0.2, 0.2)
        elev = math.radians(rng.uniform(38, 58))
        dist = rng.uniform(1.7, 2.1)
        out.append(np.array([dist * math.cos(elev) * math.cos(az),
                             dist * math.cos(elev) * math.sin(az),
                             dist * math.sin(elev)]))
    return out


def gen_scene(preset: str, seed: int = 0, width: int = 64, height: int = 64,
              shadow_cfg: ShadowConfig = ShadowConfig(), n_lights: int = 6, max_tries: int = 20):
    """Deterministic synthetic scene with ideal materials and ground-truth lights.

    Returns ``(scene, depth, lights)`` where ``lights`` is a list of single-light
    :class:`LightParams` (intensity 0.5, ambient 0.5). For ``plane-box`` each
    light is re-drawn until the brute-force oracle shadows at least 5% of the
    ground pixels.
    """
    from .oracle import occlusion_oracle

    if preset not in PRESETS:
        raise ValueError(f"unknown preset '{preset}'; valid presets: {', '.join(PRESETS)}")
    rng = np.random.default_rng([seed, PRESETS.index(preset)])
    prims = _preset_primitives(preset, rng)
    camera = default_camera(width, height)
    depth = _raycast_depth(camera, prims)
    cloud = depth_to_cloud(depth, camera)
    scene = Scene(cloud, camera, MaterialMaps.uniform(cloud.shape, 1.0, 1.0, 10.0))
    ground = cloud.mask & (np.abs(cloud.points[..., 2]) < 1e-6)

    lights = []
    for k in range(n_lights):
        pos = None
        for _ in range(max_tries):
            pos = _candidate_lights(rng, n_lights)[k]
            if preset != "plane-box":
                break
            S = occlusion_oracle(cloud, pos, shadow_cfg)
            if (S[ground] == 0).mean() >= MIN_SHADOW_COVERAGE:
                break
        lights.append(LightParams((PointLight(pos, 0.5),), 0.5))
    return scene, depth, lights


# --- benchmark harness -----------------------------------------------------------------

IDEAL = "ideal"
DEFAULT_LEVELS = (IDEAL, 0.0, 0.1, 0.2, 0.3)
REPORT_COLUMNS = ("scene", "preset", "seed", "light", "level", "model", "status", "error",
                  "iterations", "reason", "final_x", "final_y", "final_z", "message")


def level_label(level) -> str:
    return IDEAL if level is None or level == IDEAL else f"{float(level):.1f}"


def _parse_level(level):
    if level is None or (isinstance(level, str) and level.lower() == IDEAL):
        return IDEAL
    value = float(level)
    if value < 0:
        raise ValueError("noise levels must be >= 0")
    return value


@dataclass(frozen=True)
class SceneSpec:
    preset: str
    seed: int = 0

    @property
    def name(self):
        return f"{self.preset}-{self.seed}"


@dataclass(frozen=True)
class BenchConfig:
    """One benchmark: scenes x lights x noise levels x models.

    ``lights`` lists the ground-truth light indices (0..5) used for every
    scene. Noise fields are seeded from ``noise_seed`` and the experiment key,
    so reruns are bitwise reproducible.
    """
    scenes: tuple = (SceneSpec("plane-box", 0), SceneSpec("plane-spheres", 0), SceneSpec("steps", 0))
    lights: tuple = (0, 1, 2, 3)
    levels: tuple = DEFAULT_LEVELS
    models: tuple = ("diffuse", "specular", "full")
    width: int = 64
    height: int = 64
    optimizer: "OptimizerOptions" = None
    shadow: ShadowConfig = None
    noise: NoiseConfig = NoiseConfig()
    noise_seed: int = 0
    init_offset: float | None = None   # None: camera-up rule; else offset from the truth
    csv_path: str | None = None
    summary_path: str | None = None

    def __post_init__(self):
        from .estimator import OptimizerOptions
        from .gradients import ModelKind

        scenes = tuple(s if isinstance(s, SceneSpec) else SceneSpec(**s) for s in self.scenes)
        if not scenes:
            raise ValueError("benchmark needs at least one scene")
        for s in scenes:
            if s.preset not in PRESETS:
                raise ValueError(f"unknown preset '{s.preset}'; valid presets: {', '.join(PRESETS)}")
        if not self.lights:
            raise ValueError("benchmark needs at least one light")
        if any(not 0 <= int(i) < 6 for i in self.lights):
            raise ValueError("light indices must lie in 0..5")
        if not self.models:
            raise ValueError("benchmark needs at least one model")
        if not self.levels:
            raise ValueError("benchmark needs at least one noise level")
        object.__setattr__(self, "scenes", scenes)
        object.__setattr__(self, "lights", tuple(int(i) for i in self.lights))
        object.__setattr__(self, "levels", tuple(_parse_level(l) for l in self.levels))
        object.__setattr__(self, "models", tuple(ModelKind.parse(m).value for m in self.models))
        if self.optimizer is None:
            object.__setattr__(self, "optimizer", OptimizerOptions(shadow_step=BENCH_SHADOW_STEP))
        if self.shadow is None:
            object.__setattr__(self, "shadow", BENCH_SHADOW)

    def to_dict(self):
        return {
            "scenes": [{"preset": s.preset, "seed": s.seed} for s in self.scenes],
            "lights": list(self.lights),
            "levels": list(self.levels),
            "models": list(self.models),
            "width": self.width,
            "height": self.height,
            "optimizer": self.optimizer.to_dict(),
            "shadow": {k: getattr(self.shadow, k) for k in self.shadow.__dataclass_fields__},
            "noise": {k: getattr(self.noise, k) for k in ("octaves", "lacunarity", "gain", "base_frequency")},
            "noise_seed": self.noise_seed,
            "init_offset": self.init_offset,
            "csv_path": self.csv_path,
            "summary_path": self.summary_path,
        }

    @classmethod
    def from_dict(cls, doc):
        from .estimator import OptimizerOptions

        doc = dict(doc)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown benchmark config keys: {', '.join(sorted(unknown))}")
        if "scenes" in doc:
            doc["scenes"] = tuple(SceneSpec(**s) for s in doc["scenes"])
        for key in ("lights", "levels", "models"):
            if key in doc:
                doc[key] = tuple(doc[key])
        if doc.get("optimizer") is not None:
            doc["optimizer"] = OptimizerOptions.from_dict(doc["optimizer"])
        if doc.get("shadow") is not None:
            doc["shadow"] = ShadowConfig(**doc["shadow"])
        if doc.get("noise") is not None:
            doc["noise"] = NoiseConfig(**doc["noise"])
        return cls(**doc)

    @classmethod
    def load(cls, path):
        import json
        from pathlib import Path

        text = Path(path).read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(doc)


# Shadow settings for 64^2 benchmark images: R = 128 with splats wide enough
# to close the gaps between neighbouring points of the coarse cloud.
BENCH_SHADOW = ShadowConfig(resolution=128, splat=5)
# Shadow FD step for the benchmark (about 3% of the unit-scene diagonal): at
# 64^2 the 1% default sees too few boundary pixels to steer from a far start.
BENCH_SHADOW_STEP = 0.04


@dataclass(frozen=True)
class BenchRecord:
    scene: str
    preset: str
    seed: int
    light: int
    level: str
    model: str
    status: str            # "ok" | "failed"
    error: float           # position error in unit-scene units (nan if failed)
    iterations: int
    reason: str
    final: tuple
    message: str = ""
    seconds: float = 0.0   # wall time, kept out of the written report

    @property
    def key(self):
        return (self.scene, self.light, self.level)

    def row(self):
        return [self.scene, self.preset, self.seed, self.light, self.level, self.model, self.status,
                repr(self.error), self.iterations, self.reason, *(repr(float(x)) for x in self.final),
                self.message]


@dataclass(frozen=True)
class BenchReport:
    records: tuple
    levels: tuple
    models: tuple

    def rows(self, level=None, model=None):
        return [r for r in self.records
                if (level is None or r.level == level) and (model is None or r.model == model)]

    @property
    def failed(self):
        return sum(r.status != "ok" for r in self.records)

    def aggregate(self):
        """``{level: {model: {average, median, success, runs, failed}}}``."""
        rates = success_rates(self)
        out = {}
        for level in self.levels:
            out[level] = {}
            for model in self.models:
                rows = self.rows(level, model)
                errs = sorted(r.error for r in rows if r.status == "ok")
                out[level][model] = {
                    "average": float(math.fsum(errs) / len(errs)) if errs else float("nan"),
                    "median": exact_median(errs),
                    "success": rates[level][model],
                    "runs": len(rows),
                    "failed": len(rows) - len(errs),
                }
        return out

    def csv_text(self):
        import csv
        import io

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.records:
            w.writerow(r.row())
        return buf.getvalue()

    def summary(self):
        agg = self.aggregate()
        return {
            "levels": list(self.levels),
            "models": list(self.models),
            "experiments": len({r.key for r in self.records}),
            "runs": len(self.records),
            "failed": self.failed,
            "table": [{"level": level,
                       **{f"{m}_{k}": agg[level][m][k] for m in self.models
                          for k in ("average", "median", "success")}}
                      for level in self.levels],
        }

    def summary_json(self):
        import json

        return json.dumps(_json_safe(self.summary()), indent=2) + "\n"

    def table_text(self):
        agg = self.aggregate()
        head = f"{'level':>6} " + " ".join(f"{m + ' avg':>13} {m + ' med':>13} {m + ' succ%':>13}"
                                           for m in self.models)
        lines = [head]
        for level in self.levels:
            cells = " ".join(f"{agg[level][m]['average']:13.4f} {agg[level][m]['median']:13.4f} "
                             f"{agg[level][m]['success']:13.2f}" for m in self.models)
            lines.append(f"{level:>6} {cells}")
        return "\n".join(lines)

    def write(self, csv_path=None, summary_path=None, timing_path=None):
        from pathlib import Path

        def atomic(path, text):
            path = Path(path)
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_text(text)
            tmp.replace(path)

        if csv_path:
            atomic(csv_path, self.csv_text())
        if summary_path:
            atomic(summary_path, self.summary_json())
        if timing_path:
            atomic(timing_path, "scene,light,level,model,seconds\n" + "".join(
                f"{r.scene},{r.light},{r.level},{r.model},{r.seconds:.3f}\n" for r in self.records))


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_json_safe(v) for v in x]
    return x


def exact_median(values):
    """Middle element for odd counts, mean of the two middle ones for even counts."""
    v = sorted(values)
    n = len(v)
    if n == 0:
        return float("nan")
    if n % 2:
        return float(v[n // 2])
    return float((v[n // 2 - 1] + v[n // 2]) / 2.0)


def success_rates(report: BenchReport):
    """Share of experiments each model wins, per noise level, in percent.

    The winner of an experiment is the model with the smallest position error;
    exact ties split the win evenly. A failed run counts as an infinite error.
    """
    out = {}
    for level in report.levels:
        groups = {}
        for r in report.rows(level):
            groups.setdefault(r.key, {})[r.model] = r.error if r.status == "ok" else math.inf
        wins = {m: 0.0 for m in report.models}
        for key in sorted(groups):
            errs = groups[key]
            missing = [m for m in report.models if m not in errs]
            if missing:
                raise ValueError(f"experiment {key} lacks rows for model(s) {', '.join(missing)}")
            best = min(errs.values())
            tied = [m for m in report.models if errs[m] == best]
            for m in tied:
                wins[m] += 1.0 / len(tied)
        n = len(groups)
        out[level] = {m: (100.0 * wins[m] / n if n else float("nan")) for m in report.models}
    return out


def experiment_seed(noise_seed, scene_index, level_index):
    """Noise seed for one (scene, level) cell; shared by its lights and models."""
    return int(np.random.SeedSequence([noise_seed, scene_index, level_index]).generate_state(1)[0])


def camera_up_init(scene: Scene) -> np.ndarray:
    """Benchmark start: the camera centre plus one unit-scene unit along camera up."""
    from .scene import normalize_scene

    _, tf = normalize_scene(scene)
    return tf.inverse(tf.apply(scene.camera.center) + scene.camera.up)


def offset_init(truth, scene: Scene, offset, rng) -> np.ndarray:
    """Random start at distance ``offset`` unit-scene units from ``truth``."""
    from .scene import normalize_scene

    _, tf = normalize_scene(scene)
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    return tf.inverse(tf.apply(truth) + offset * v)


@functools.lru_cache(maxsize=8)
def _cached_scene(preset, seed, width, height, shadow):
    return gen_scene(preset, seed, width, height, shadow)


def _run_cell(args):
    """All models for one (scene, light, level); returns their records."""
    from .estimator import estimate_light
    from .gradients import ModelKind
    from .renderer import render
    from .scene import normalize_scene

    cfg, si, li, vi = args
    spec = cfg.scenes[si]
    level = cfg.levels[vi]
    scene, _, truths = _cached_scene(spec.preset, spec.seed, cfg.width, cfg.height, cfg.shadow)
    truth = truths[cfg.lights[li]]
    target, _ = render(scene, truth, cfg.shadow)         # always ideal materials
    noise = None if level == IDEAL else NoiseConfig(level, experiment_seed(cfg.noise_seed, si, vi),
                                                    cfg.noise.octaves, cfg.noise.lacunarity,
                                                    cfg.noise.gain, cfg.noise.base_frequency)
    belief = scene.with_materials(perturb_materials(scene.materials, noise))
    _, tf = normalize_scene(scene)
    p_true = truth.lights[0].position
    if cfg.init_offset is None:
        p0 = camera_up_init(scene)
    else:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.noise_seed, si, cfg.lights[li], 7]))
        p0 = offset_init(p_true, scene, cfg.init_offset, rng)
    init = LightParams((PointLight(p0, truth.lights[0].intensity),), truth.ambient)

    out = []
    for model in cfg.models:
        common = dict(scene=spec.name, preset=spec.preset, seed=spec.seed, light=cfg.lights[li],
                      level=level_label(level), model=model)
        try:
            res = estimate_light(belief, target, init, ModelKind(model), cfg.optimizer, cfg.shadow)
            err = float(np.linalg.norm(tf.apply(res.position) - tf.apply(p_true)))
            out.append(BenchRecord(**common, status="ok", error=err, iterations=res.iterations,
                                   reason=res.reason, final=tuple(float(x) for x in res.position),
                                   seconds=res.seconds))
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            out.append(BenchRecord(**common, status="failed", error=float("nan"),
                                   iterations=getattr(exc, "iteration", 0), reason="failed",
                                   final=(float("nan"),) * 3, message=str(exc)))
    return out


def run_benchmark(cfg: BenchConfig, workers: int = 1, progress=None) -> BenchReport:
    """Run every (scene, light, level, model) combination of ``cfg``.

    Experiments are independent; with ``workers > 1`` they run in worker
    processes. Records are sorted by experiment key before aggregation, so the
    report does not depend on scheduling.
    """
    cells = [(cfg, si, li, vi) for si in range(len(cfg.scenes)) for li in range(len(cfg.lights))
             for vi in range(len(cfg.levels))]
    results = []
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            for recs in pool.map(_run_cell, cells):
                results.extend(recs)
                if progress:
                    progress(recs)
    else:
        for cell in cells:
            recs = _run_cell(cell)
            results.extend(recs)
            if progress:
                progress(recs)
    level_order = {level_label(l): i for i, l in enumerate(cfg.levels)}
    model_order = {m: i for i, m in enumerate(cfg.models)}
    scene_order = {s.name: i for i, s in enumerate(cfg.scenes)}
    results.sort(key=lambda r: (level_order[r.level], scene_order[r.scene], r.light, model_order[r.model]))
    report = BenchReport(tuple(results), tuple(level_label(l) for l in cfg.levels), cfg.models)
    if cfg.csv_path or cfg.summary_path:
        report.write(cfg.csv_path, cfg.summary_path)
    return report
