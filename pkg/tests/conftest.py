import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hardsplat.cameras import Camera, SceneSpec, gen_synthetic
from hardsplat.gaussians import GaussianCloud, logit


def random_cloud(rng, n, span=0.5, scale_range=(0.08, 0.2),
                 opacity_range=(0.3, 0.8), color_range=(0.1, 0.9)):
    """Random cloud with comfortable margins from every activation clamp,
    so finite differences never straddle a kink."""
    return GaussianCloud(
        means=rng.uniform(-span, span, (n, 3)),
        log_scales=np.log(rng.uniform(*scale_range, (n, 3))),
        rotations=rng.normal(size=(n, 4)),
        raw_opacities=logit(rng.uniform(*opacity_range, n)),
        colors=rng.uniform(*color_range, (n, 3)),
    )


def frontal_camera(width=24, height=24, focal=1.5, distance=2.5, view_id=0):
    return Camera(
        fx=focal * width, fy=focal * width,
        cx=width / 2.0, cy=height / 2.0,
        width=width, height=height,
        rotation=np.eye(3), translation=np.array([0.0, 0.0, distance]),
        view_id=view_id,
    )


@pytest.fixture(scope="session")
def small_scene():
    """Shared 32x32 synthetic scene for fast integration tests."""
    spec = SceneSpec(views=8, width=32, height=32, gaussians=60, test_every=4)
    scene, gt_cloud = gen_synthetic(spec, seed=11)
    return scene, gt_cloud
