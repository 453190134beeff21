import json

import numpy as np
import pytest

from fusionlab.core.scenesim import SimConfig
from fusionlab.core.types import CameraModel


def axis_camera(f=100.0, w=200, h=200, R=None, t=None) -> CameraModel:
    K = np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])
    return CameraModel(K=K, R=np.eye(3) if R is None else R, t=np.zeros(3) if t is None else t,
                       image_size=(h, w))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def camera():
    return axis_camera()


@pytest.fixture
def small_sim():
    return SimConfig(n_objects=(2, 4), rays_per_object=(20, 40), image_size=(48, 80), focal=40.0,
                     clutter_points=30)


SMALL_EXPERIMENT = {
    "version": "ccf-experiment-v1",
    "seed": 7,
    "paths": {"dataset": "data", "out": "out"},
    "sim": {"n_objects": [2, 4], "rays_per_object": [20, 40], "image_size": [48, 80],
            "focal": 40.0, "clutter_points": 30},
    "splits": [
        {"name": "source", "domain": "Source", "severity": 0.0, "n_scenes": 3},
        {"name": "rain", "domain": "Rain", "severity": 0.7, "n_scenes": 2}
    ],
    "depth": {"confidence_epochs": 20},
    "mask": {"kind": "ComplementaryGrid", "grid": {"unit_range": [8, 16], "keep_ratio": 0.5}},
    "train": {"epochs": 1, "batch_size": 2},
}


@pytest.fixture
def experiment(tmp_path):
    """Write a small experiment config; call with overrides per top-level key"""
    def write(**overrides):
        data = json.loads(json.dumps(SMALL_EXPERIMENT))
        data.update(overrides)
        path = tmp_path / "experiment.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        return path
    return write
