import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from gtforge.geometry import OrientedCamera
from gtforge.synth import NADIR_ROTATION, Box, SceneRecipe, SyntheticScene


def make_nadir(center, focal=1000.0, size=(1000, 1000)):
    return OrientedCamera(
        focal=focal,
        principal_point=(size[0] / 2.0, size[1] / 2.0),
        image_size=size,
        rotation=NADIR_ROTATION,
        center=np.asarray(center, dtype=float),
    )


def perturbed_rotation(base, rng, max_deg=5.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(0.1, max_deg))
    return Rotation.from_rotvec(axis * angle).as_matrix() @ base


@pytest.fixture(scope="session")
def box_scene():
    """Small box-on-plane scene whose cameras both cover the full extent."""
    recipe = SceneRecipe(
        extent=(200.0, 200.0),
        boxes=(Box(80.0, 80.0, 40.0, 40.0, 10.0),),
        altitude=1000.0,
        baseline=300.0,
        focal=500.0,
        image_size=(300, 300),
        point_spacing=1.0,
        jitter=0.3,
        seed=7,
    )
    return SyntheticScene(recipe)


@pytest.fixture(scope="session")
def box_scene_cloud(box_scene):
    return box_scene.sample_cloud()
