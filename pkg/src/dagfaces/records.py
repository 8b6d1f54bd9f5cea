"""A face record couples an image with its landmark layout and identity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import LandmarkSet
from .images import ImageBuffer


@dataclass(frozen=True)
class FaceRecord:
    """One face image plus its landmarks and identity label.

    `spec` optionally carries the generator factors behind a synthetic face.
    `provenance` marks derived records: for a warped face it is (target
    record id, source record id), i.e. whose layout was imposed on whose
    pixels.
    """

    image: ImageBuffer
    landmarks: LandmarkSet
    identity: int
    record_id: int | None = None
    spec: "object | None" = None  # IdentitySpec when synthetic
    provenance: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.identity < 0:
            raise ValueError("identity labels must be non-negative")
        pts = self.landmarks.points
        w, h = self.image.width, self.image.height
        if (
            pts[:, 0].min() < -1e-9
            or pts[:, 0].max() > w + 1e-9
            or pts[:, 1].min() < -1e-9
            or pts[:, 1].max() > h + 1e-9
        ):
            raise ValueError("landmarks must lie inside the image bounds")


def image_batch(records: list[FaceRecord]) -> np.ndarray:
    """Stack single-channel record images into an (N, 1, H, W) float array."""
    return np.stack([r.image.plane() for r in records])[:, None, :, :]
