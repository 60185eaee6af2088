"""Built-in scene constructors.

`two_spheres` is the scene used by the test suite and the README
walkthrough: two textured spheres watched by a ring of cameras, sized so
that neighboring views occlude each other's sphere backsides.
"""

from __future__ import annotations

import numpy as np

from rayvis.camera import look_at_camera
from rayvis.scene import Material, Sphere, SyntheticScene


def two_spheres(
    n_cameras: int = 16,
    width: int = 64,
    height: int = 64,
    ring_radius: float = 3.0,
    ring_height: float = 0.8,
    near: float = 1.2,
    far: float = 5.4,
) -> SyntheticScene:
    """Two checkered spheres inside a camera ring looking at the origin."""
    red = Material(
        albedo=(0.72, 0.3, 0.24),
        checker_color=(0.88, 0.66, 0.42),
        checker_cell=0.7,
        specular_strength=0.15,
        shininess=6.0,
    )
    blue = Material(
        albedo=(0.24, 0.4, 0.72),
        checker_color=(0.46, 0.68, 0.62),
        checker_cell=0.8,
        specular_strength=0.15,
        shininess=6.0,
    )
    primitives = [
        Sphere(center=(-0.55, 0.05, 0.1), radius=0.55, material=red),
        Sphere(center=(0.65, -0.1, -0.15), radius=0.7, material=blue),
    ]
    cameras = []
    for k in range(n_cameras):
        ang = 2.0 * np.pi * k / n_cameras
        eye = (ring_radius * np.cos(ang), ring_height, ring_radius * np.sin(ang))
        cameras.append(
            look_at_camera(
                width, height, 0.95 * width, 0.95 * width,
                width / 2.0, height / 2.0, eye, (0.0, 0.0, 0.0),
            )
        )
    return SyntheticScene(
        primitives=primitives,
        background=(0.42, 0.44, 0.47),
        cameras=cameras,
        near=near,
        far=far,
    )
