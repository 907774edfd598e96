"""Point-light position estimation from a single image with known geometry.

Blinn-Phong shading over an oriented point cloud, cube shadow maps built by
point splatting, analytic and finite-difference light Jacobians, a plain
gradient-descent estimator and a synthetic robustness benchmark.
"""

from .gradients import EnergyGradient, ModelKind, energy, energy_and_gradient
from .renderer import Image, LightParams, PointLight, ShadowConfig, render, shade
from .scene import (Camera, DepthMap, MaterialMaps, OrientedPointCloud, Scene, SimilarityTransform,
                    depth_to_cloud, load_scene, normalize_scene, save_scene)

__version__ = "0.1.0"

__all__ = [
    "Camera", "DepthMap", "EnergyGradient", "Image", "LightParams", "MaterialMaps", "ModelKind",
    "OrientedPointCloud", "PointLight", "Scene", "ShadowConfig", "SimilarityTransform",
    "depth_to_cloud", "energy", "energy_and_gradient", "load_scene", "normalize_scene", "render",
    "save_scene", "shade",
]
