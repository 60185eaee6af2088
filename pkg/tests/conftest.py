import numpy as np
import pytest

from rayvis.optim import init_from_depth
from rayvis.render import RenderView
from rayvis.scene import render_ground_truth
from rayvis.scenes import two_spheres


@pytest.fixture(scope="session")
def ring_scene():
    return two_spheres()


@pytest.fixture(scope="session")
def ring_ground_truth(ring_scene):
    """Images and depth maps of every reference view, keyed by index."""
    images, depths = {}, {}
    for i, cam in enumerate(ring_scene.cameras):
        img, dep = render_ground_truth(ring_scene, cam)
        images[i] = img
        depths[i] = dep
    return images, depths


@pytest.fixture(scope="session")
def gt_views(ring_scene, ring_ground_truth):
    """RenderViews with GT-depth-initialized maps (sigma 0.005) for all views."""
    images, depths = ring_ground_truth
    views = {}
    for i, cam in enumerate(ring_scene.cameras):
        dmap = init_from_depth(depths[i], 0.005, 2, view=i)
        views[i] = RenderView(i, cam, dmap, images[i])
    return views


def make_rng(seed):
    return np.random.default_rng(seed)
