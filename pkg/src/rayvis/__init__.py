"""Occlusion-aware image-based rendering from per-ray visibility distributions.

A scene is represented by one distribution map per input view: every pixel
carries the raw parameters of a mixture-of-logistics CDF giving the
probability that the pixel's camera ray is occluded before a given depth.
Visibility of any 3D point to any view is then a single CDF evaluation,
which drives an occlusion-aware volume renderer (spherical-harmonics color
fitting weighted by hitting probabilities) and a per-scene optimizer that
refines the maps against render/consistency/depth losses.
"""

__version__ = "0.1.0"

from rayvis.camera import PinholeCamera, Ray, generate_ray, project
from rayvis.raydist import (
    DensityProfile,
    DistributionMap,
    MixtureOfLogistics,
    RawRayParams,
    decode,
    grad_cdf,
    hit_prob_interval,
    input_ray_alpha,
    occlusion_cdf,
    visibility,
)
from rayvis.render import RenderConfig, WorkingSet, psnr, render_image, select_working_views
from rayvis.scene import Material, Primitive, SyntheticScene, perturb_depth
from rayvis.shcolor import SHBasis, SHCoefficients, SHRegularizer, sh_color, sh_eval, sh_fit

__all__ = [
    "DensityProfile",
    "DistributionMap",
    "Material",
    "MixtureOfLogistics",
    "PinholeCamera",
    "Primitive",
    "RawRayParams",
    "Ray",
    "RenderConfig",
    "SHBasis",
    "SHCoefficients",
    "SHRegularizer",
    "SyntheticScene",
    "WorkingSet",
    "decode",
    "generate_ray",
    "grad_cdf",
    "hit_prob_interval",
    "input_ray_alpha",
    "occlusion_cdf",
    "perturb_depth",
    "project",
    "psnr",
    "render_image",
    "select_working_views",
    "sh_color",
    "sh_eval",
    "sh_fit",
    "visibility",
]
