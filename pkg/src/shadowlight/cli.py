"""``shadowlight`` command line: gen-scene, render, estimate, check-grad, benchmark.

Exit codes: 0 success, 1 other failure, 2 usage or precondition error,
3 divergence, 4 gradient-check failure. ``SHADOWLIGHT_THREADS`` sets the
number of benchmark worker processes (default 1).
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3, 4
THREADS_ENV = "SHADOWLIGHT_THREADS"


class UsageError(Exception):
    pass


def _vector(text, name="vector"):
    try:
        parts = [float(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"{name} must be three comma-separated numbers, got '{text}'") from None
    if len(parts) != 3 or not all(np.isfinite(parts)):
        raise UsageError(f"{name} must be three finite comma-separated numbers, got '{text}'")
    return np.array(parts)


def threads_from_env(env=None) -> int:
    raw = (os.environ if env is None else env).get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got '{raw}'") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got '{raw}'")
    return n


def _shadow_cfg(args):
    from .renderer import ShadowConfig

    try:
        return ShadowConfig(resolution=args.resolution, splat=args.splat, bias=args.bias,
                            bias_fraction=args.bias_fraction, slope_bias=args.slope_bias)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _add_shadow_flags(p, resolution=256, splat=3):
    g = p.add_argument_group("shadow maps")
    g.add_argument("--resolution", type=int, default=resolution, help="cube-face resolution R")
    g.add_argument("--splat", type=int, default=splat, help="splat footprint in texels")
    g.add_argument("--bias", type=float, default=None, help="absolute depth bias (scene units)")
    g.add_argument("--bias-fraction", type=float, default=0.02, help="bias as a fraction of the scene diagonal")
    g.add_argument("--slope-bias", type=float, default=1.0, help="slope-scaled bias factor")


def _load_scene(path):
    from .scene import SceneError, load_scene

    try:
        return load_scene(path)
    except FileNotFoundError:
        raise UsageError(f"scene file not found: {path}") from None
    except (SceneError, ValueError, KeyError) as exc:
        raise UsageError(f"{path}: {exc}") from None


# --- commands ------------------------------------------------------------------------------

def cmd_gen_scene(args):
    from .scene import save_scene
    from .synthbench import gen_scene

    scene, depth, lights = gen_scene(args.preset, args.seed, args.width, args.height)
    save_scene(scene, args.out, depth=depth,
               lights=[{"position": lp.lights[0].position.tolist(), "intensity": lp.lights[0].intensity}
                       for lp in lights])
    print(f"wrote {args.out}: {args.preset} seed {args.seed}, {int(scene.cloud.mask.sum())} valid pixels, "
          f"{len(lights)} ground-truth lights")
    return EXIT_OK


def _light_params(args):
    from .renderer import LightParams, PointLight

    positions = [_vector(v, "--light") for v in args.light]
    intensities = args.intensity or [0.5]
    if len(intensities) == 1:
        intensities = intensities * len(positions)
    if len(intensities) != len(positions):
        raise UsageError("give one --intensity per --light, or a single value for all")
    try:
        return LightParams(tuple(PointLight(p, i) for p, i in zip(positions, intensities)), args.ambient)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_render(args):
    from .gradients import ModelKind, render_model
    from .imageio import write_pfm, write_png

    scene, _ = _load_scene(args.scene)
    lights = _light_params(args)
    cfg = _shadow_cfg(args)
    model = ModelKind.parse(args.model)
    try:
        image, buf, _ = render_model(scene, lights, model, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_pfm(args.out, image.to_array())
    if args.png:
        write_png(args.png, image.to_array())
    if args.shadow_mask:
        occluded = (buf.values == 0).any(axis=0).astype(float)
        mask = np.where(scene.cloud.mask, occluded, np.nan)
        write_pfm(args.shadow_mask, mask)
    shadowed = int(((buf.values == 0).any(axis=0) & scene.cloud.mask).sum()) if len(buf.values) else 0
    print(f"wrote {args.out}: {image.shape[1]}x{image.shape[0]}, {shadowed} shadowed pixels")
    return EXIT_OK


def _optimizer(args):
    from .estimator import OptimizerOptions

    try:
        return OptimizerOptions(rate=args.rate, tolerance=args.tol, max_iter=args.max_iter,
                                shadow_step=args.shadow_step, free_intensity=args.free_intensity,
                                free_ambient=args.free_ambient, energy_scale=args.energy_scale,
                                reference_pixels=args.reference_pixels)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_estimate(args):
    from .estimator import (DivergenceError, EstimationError, estimate_light, write_gradient_csv,
                            write_result, write_trace_csv)
    from .gradients import ModelKind
    from .imageio import read_pfm
    from .renderer import Image, LightParams, PointLight

    scene, _ = _load_scene(args.scene)
    try:
        target = Image.from_array(read_pfm(args.image))
    except FileNotFoundError:
        raise UsageError(f"image not found: {args.image}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    init = LightParams((PointLight(_vector(args.init, "--init"), args.intensity),), args.ambient)
    truth = _vector(args.ground_truth, "--ground-truth") if args.ground_truth else None
    model = ModelKind.parse(args.model)
    try:
        res = estimate_light(scene, target, init, model, _optimizer(args), _shadow_cfg(args))
    except DivergenceError as exc:
        print(f"error: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except EstimationError as exc:
        raise UsageError(str(exc)) from None

    if args.out:
        write_result(res, args.out)
    if args.trace:
        write_trace_csv(res, args.trace)
    if args.grad_dump:
        write_gradient_csv(res, args.grad_dump)
    pos = res.position
    print(f"final position: {pos[0]:.6f},{pos[1]:.6f},{pos[2]:.6f}")
    if truth is not None:
        err = float(np.linalg.norm(res.transform.apply(pos) - res.transform.apply(truth)))
        print(f"position error (unit-scene units): {err:.6f}")
    print(f"iterations: {res.iterations}")
    print(f"termination: {res.reason}")
    print(f"energy: {res.energy:.6g}")
    return EXIT_OK


def cmd_check_grad(args):
    from .gradients import ModelKind, check_shading_gradients, check_shadow_directional
    from .renderer import PointLight
    from .scene import normalize_scene

    scene, _ = _load_scene(args.scene)
    model = ModelKind.parse(args.model)
    nscene, tf = normalize_scene(scene)
    light = PointLight(tf.apply(_vector(args.light, "--light")), args.intensity)
    pts = nscene.cloud.valid_points()
    if np.min(np.linalg.norm(pts - light.position, axis=1)) < 1e-6:
        raise UsageError("light position lies on the scene surface")
    checks = check_shading_gradients(nscene, light, step=args.step)
    if not model.specular:
        checks = checks[:1]
    failed = [c for c in checks if not c.passed(args.tol)]
    for c in checks:
        print(f"{c.name:9s} max relative error {c.max_rel_error:.3e} over {c.checked} pixels "
              f"({'ok' if c.passed(args.tol) else 'FAIL'})")
    if model.shadows:
        rng = np.random.default_rng(args.seed)
        v = rng.normal(size=3)
        rel, an, fd = check_shadow_directional(nscene, light, _shadow_cfg(args), direction=v)
        print(f"shadow    directional check: assembled {an:.4g} vs direct {fd:.4g}, "
              f"relative error {rel:.3f} ({'ok' if rel < 0.1 else 'outside 10%'})")
    if failed:
        for c in failed:
            print(f"worst {c.name} pixel {c.worst_pixel}: {json.dumps(c.worst_detail)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_benchmark(args):
    from .synthbench import BenchConfig, run_benchmark

    try:
        cfg = BenchConfig.load(args.config)
    except FileNotFoundError:
        raise UsageError(f"config not found: {args.config}") from None
    except (ValueError, TypeError) as exc:
        raise UsageError(f"{args.config}: {exc}") from None
    workers = threads_from_env()
    out = Path(args.out)
    report = run_benchmark(cfg, workers=workers)
    csv_path = out if out.suffix == ".csv" else out.with_suffix(".csv")
    summary_path = csv_path.with_suffix(".json")
    report.write(csv_path, summary_path, csv_path.with_suffix(".timing.csv") if args.timing else None)
    print(report.table_text())
    print(f"{len(report.records)} runs, {report.failed} failed; wrote {csv_path} and {summary_path}")
    if report.records and report.failed == len(report.records):
        return EXIT_OTHER
    return EXIT_OK


# --- parser --------------------------------------------------------------------------------

def build_parser():
    from .gradients import ModelKind
    from .synthbench import PRESETS

    models = [m.value for m in ModelKind]
    p = argparse.ArgumentParser(prog="shadowlight", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="generate a procedural scene")
    g.add_argument("--preset", required=True, choices=PRESETS)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scene)

    r = sub.add_parser("render", help="render an image of a scene")
    r.add_argument("--scene", required=True)
    r.add_argument("--light", action="append", required=True, help="x,y,z (repeat for several lights)")
    r.add_argument("--intensity", type=float, action="append", help="light intensity I_L (default 0.5)")
    r.add_argument("--ambient", type=float, default=0.5)
    r.add_argument("--model", choices=models, default="full")
    r.add_argument("--out", required=True, help="output PFM")
    r.add_argument("--png", help="optional 8-bit preview")
    r.add_argument("--shadow-mask", help="optional PFM, 1 where any light is occluded")
    _add_shadow_flags(r)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("estimate", help="estimate the light position from an image")
    e.add_argument("--scene", required=True)
    e.add_argument("--image", required=True, help="observed image (PFM)")
    e.add_argument("--init", required=True, help="initial light position x,y,z")
    e.add_argument("--intensity", type=float, default=0.5)
    e.add_argument("--ambient", type=float, default=0.5)
    e.add_argument("--model", choices=models, default="full")
    e.add_argument("--rate", type=float, default=0.02)
    e.add_argument("--tol", type=float, default=1e-4)
    e.add_argument("--max-iter", type=int, default=1000)
    e.add_argument("--shadow-step", type=float, default=None, help="FD step h in unit-scene units")
    e.add_argument("--energy-scale", choices=("pixels", "sum"), default="pixels")
    e.add_argument("--reference-pixels", type=float, default=25.0,
                   help="energy weight is reference_pixels / valid pixels")
    e.add_argument("--free-intensity", action="store_true")
    e.add_argument("--free-ambient", action="store_true")
    e.add_argument("--ground-truth", help="true light x,y,z, to print the error")
    e.add_argument("--out", help="result JSON")
    e.add_argument("--trace", help="trace CSV")
    e.add_argument("--grad-dump", help="per-iteration gradient components CSV")
    _add_shadow_flags(e)
    e.set_defaults(func=cmd_estimate)

    c = sub.add_parser("check-grad", help="compare analytic gradients with finite differences")
    c.add_argument("--scene", required=True)
    c.add_argument("--light", required=True)
    c.add_argument("--intensity", type=float, default=0.5)
    c.add_argument("--model", choices=models, default="specular")
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0, help="seed of the shadow check direction")
    _add_shadow_flags(c)
    c.set_defaults(func=cmd_check_grad)

    b = sub.add_parser("benchmark", help="run the noise-robustness benchmark")
    b.add_argument("--config", required=True, help="benchmark config JSON")
    b.add_argument("--out", required=True, help="report CSV; the summary goes next to it as .json")
    b.add_argument("--timing", action="store_true", help="also write wall times to a .timing.csv")
    b.set_defaults(func=cmd_benchmark)
    return p


VECTOR_FLAGS = ("--light", "--init", "--ground-truth")
_NUMERIC = re.compile(r"^-[0-9.]")


def _join_vector_flags(argv):
    # argparse would read "-0.3,0.1,1" as an option; glue such values to their flag
    out = []
    it = iter(argv)
    for tok in it:
        if tok in VECTOR_FLAGS:
            nxt = next(it, None)
            if nxt is not None and _NUMERIC.match(nxt):
                out.append(f"{tok}={nxt}")
                continue
            out.append(tok)
            if nxt is not None:
                out.append(nxt)
        else:
            out.append(tok)
    return out


def main(argv=None):
    parser = build_parser()
    argv = _join_vector_flags(sys.argv[1:] if argv is None else list(argv))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    except Exception as exc:  # noqa: BLE001 - last-resort reporting for the CLI
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
