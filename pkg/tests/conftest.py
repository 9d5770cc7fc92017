import numpy as np
import pytest

from anchorsplat.scene import Hyperparams, voxelize_points


def make_random_scene(rng, n_points=30, k=2, top_resolution=4, spread=1.0,
                      randomize=True):
    """Small scene with randomized child parameters for renderer/loss tests."""
    hyper = Hyperparams(top_resolution=top_resolution, level_scale=2, k=k,
                        language_dim=8)
    points = rng.uniform(-spread / 2, spread / 2, size=(n_points, 3))
    scene = voxelize_points(points, hyper, rng=rng)
    if randomize:
        scene.child_offsets = rng.uniform(-0.8, 0.8, size=scene.child_offsets.shape)
        scene.child_rel_scales = rng.normal(scale=1.0, size=scene.child_rel_scales.shape)
        q = rng.normal(size=scene.child_rotations.shape)
        q /= np.linalg.norm(q, axis=-1, keepdims=True)
        scene.child_rotations = q
        scene.child_opacities = rng.uniform(0.05, 0.95, size=scene.child_opacities.shape)
        scene.child_colors = rng.uniform(0, 1, size=scene.child_colors.shape)
        scene.version += 1
    return scene


@pytest.fixture
def rng():
    return np.random.default_rng(0)
