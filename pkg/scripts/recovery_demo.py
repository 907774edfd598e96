"""Recover a known light from a rendered target, starting a fixed distance away.

Prints the error of each model for every preset and light index.
"""
import argparse
from dataclasses import dataclass

import numpy as np

from shadowlight.estimator import OptimizerOptions, estimate_light
from shadowlight.gradients import ModelKind
from shadowlight.renderer import LightParams, ShadowConfig, render
from shadowlight.scene import normalize_scene
from shadowlight.synthbench import PRESETS, gen_scene


@dataclass
class DemoConfig:
    size: int = 64
    offset: float = 0.15
    seed: int = 0
    resolution: int = 128
    splat: int = 5
    max_iter: int = 1000


def run(cfg: DemoConfig):
    shadow = ShadowConfig(resolution=cfg.resolution, splat=cfg.splat)
    rng = np.random.default_rng(cfg.seed)
    for preset in PRESETS:
        scene, _, truths = gen_scene(preset, cfg.seed, cfg.size, cfg.size)
        _, tf = normalize_scene(scene)
        for k, truth in enumerate(truths):
            p = truth.lights[0].position
            target, _ = render(scene, truth, shadow)
            v = rng.normal(size=3)
            p0 = tf.inverse(tf.apply(p) + cfg.offset * v / np.linalg.norm(v))
            cells = []
            for model in ModelKind:
                res = estimate_light(scene, target, LightParams.single(p0), model,
                                     OptimizerOptions(max_iter=cfg.max_iter), shadow)
                err = np.linalg.norm(tf.apply(res.position) - tf.apply(p))
                cells.append(f"{model.value} {err:.4f} ({res.iterations} it)")
            print(f"{preset:>13} light {k}: " + ", ".join(cells), flush=True)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for name, default in vars(DemoConfig()).items():
        ap.add_argument(f"--{name.replace('_', '-')}", type=type(default), default=default)
    run(DemoConfig(**vars(ap.parse_args())))
