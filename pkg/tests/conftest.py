import os

# one BLAS worker: faster at these sizes and bitwise reproducible
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from mvdet import head, synth


@pytest.fixture(scope="session")
def tiny_scene():
    spec = synth.SceneSpec(
        num_cameras=2, image_width=64, image_height=64, min_objects=2, max_objects=3
    )
    return synth.gen_scene(spec, seed=5)


@pytest.fixture(scope="session")
def tiny_detector(tiny_scene):
    cfg = head.HeadConfig(
        num_layers=2,
        num_queries=4,
        hidden=16,
        num_heads=4,
        num_classes=tiny_scene.spec.num_classes,
        bounds=tiny_scene.spec.bounds,
    )
    return head.Detector.create(cfg, seed=3)


@pytest.fixture()
def tiny_images(tiny_scene):
    return tiny_scene.images.astype(np.float64) / 255.0
