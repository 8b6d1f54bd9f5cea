"""Shared fixtures: a small rendered dataset and helpers reused across files."""

from __future__ import annotations

import numpy as np
import pytest

from dagfaces.geometry import LandmarkSet
from dagfaces.images import ImageBuffer
from dagfaces.records import FaceRecord
from dagfaces.synth import generate_dataset, load_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """10 identities x 5 images at 32 px; enough for pipeline-level tests."""
    root = tmp_path_factory.mktemp("ds-small")
    return generate_dataset(10, 5, seed=0, out_dir=root, image_size=32)


@pytest.fixture(scope="session")
def small_dataset_reloaded(small_dataset):
    return load_dataset(small_dataset.root)


def random_landmarks(rng: np.random.Generator, k: int, lo: float = 2.0, hi: float = 30.0):
    """General-position landmark set: resamples until non-collinear."""
    while True:
        pts = rng.uniform(lo, hi, size=(k, 2))
        centered = pts - pts.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-6) == 2 or k < 3:
            return LandmarkSet(pts)


def random_record(rng: np.random.Generator, identity: int, record_id: int, size: int = 32):
    img = ImageBuffer(rng.uniform(-1.0, 1.0, size=(size, size, 1)))
    lms = random_landmarks(rng, 5, lo=4.0, hi=size - 4.0)
    return FaceRecord(image=img, landmarks=lms, identity=identity, record_id=record_id)
