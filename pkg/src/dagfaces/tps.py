"""Thin-plate-spline landmark interpolation and image warping.

A spline fitted to K control-point pairs maps the plane so every source
point lands exactly on its target (up to solver round-off) while bending as
little as possible. Warping an image evaluates the inverse-direction spline
at every output pixel center and samples the input bilinearly, so no output
pixel is ever left unassigned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CanonicalFrame, LandmarkSet, align_landmarks
from .images import ImageBuffer, bilinear_sample
from .records import FaceRecord

# Kernel singular values below this fraction of the largest indicate a
# configuration the bordered system cannot support (coincident or collinear
# control points).
_SINGULAR_REL_TOL = 1e-12


class SingularConfigurationError(ValueError):
    """Control points admit no unique spline (coincident or collinear)."""


@dataclass(frozen=True)
class TpsTransform:
    """Fitted spline: affine part plus kernel weights anchored at the sources.

    Maps a point p to  affine @ (1, u, v)  +  sum_k weights[k] * U(|p - s_k|)
    where U(r) = r^2 log r^2 and s_k are the source control points. The
    weights satisfy the moment conditions (they sum to zero and are
    orthogonal to the source coordinates), which kills the kernel's
    far-field growth beyond affine order.
    """

    source_points: np.ndarray  # (K, 2)
    affine: np.ndarray  # (2, 3), columns are (const, u, v)
    weights: np.ndarray  # (K, 2)
    regularization: float = 0.0

    def __post_init__(self) -> None:
        src = np.array(self.source_points, dtype=np.float64)
        aff = np.array(self.affine, dtype=np.float64)
        wts = np.array(self.weights, dtype=np.float64)
        if src.ndim != 2 or src.shape[1] != 2 or src.shape[0] < 3:
            raise ValueError(f"source points must be (K >= 3, 2), got {src.shape}")
        if aff.shape != (2, 3):
            raise ValueError(f"affine part must be (2, 3), got {aff.shape}")
        if wts.shape != src.shape:
            raise ValueError(f"weights must match source points, got {wts.shape}")
        for arr in (src, aff, wts):
            arr.setflags(write=False)
        object.__setattr__(self, "source_points", src)
        object.__setattr__(self, "affine", aff)
        object.__setattr__(self, "weights", wts)

    @property
    def k(self) -> int:
        return int(self.source_points.shape[0])


def _kernel(sq_dist: np.ndarray) -> np.ndarray:
    # U(r) = r^2 log r^2, with the removable singularity U(0) = 0.
    with np.errstate(divide="ignore", invalid="ignore"):
        out = sq_dist * np.log(sq_dist)
    return np.where(sq_dist > 0.0, out, 0.0)


def fit_tps(
    source: LandmarkSet, target: LandmarkSet, regularization: float = 0.0
) -> TpsTransform:
    """Fit the spline taking each source landmark to its target partner.

    With regularization 0 the fit interpolates exactly; positive values
    trade exactness for smoothness by stiffening the kernel block.

    Raises
    ------
    SingularConfigurationError
        If the source points are coincident or collinear, or otherwise make
        the bordered system numerically singular.
    ValueError
        If landmark counts disagree or regularization is negative.
    """
    if source.k != target.k:
        raise ValueError(f"landmark count mismatch: {source.k} vs {target.k}")
    if not (np.isfinite(regularization) and regularization >= 0.0):
        raise ValueError(f"regularization must be finite and >= 0, got {regularization}")
    k = source.k
    src = source.points
    diff = src[:, None, :] - src[None, :, :]
    sq = (diff * diff).sum(axis=2)
    phi = _kernel(sq) + regularization * np.eye(k)
    p = np.concatenate([np.ones((k, 1)), src], axis=1)
    lhs = np.zeros((k + 3, k + 3))
    lhs[:k, :k] = phi
    lhs[:k, k:] = p
    lhs[k:, :k] = p.T
    rhs = np.zeros((k + 3, 2))
    rhs[:k] = target.points

    sv = np.linalg.svd(lhs, compute_uv=False)
    if sv[-1] <= _SINGULAR_REL_TOL * sv[0]:
        raise SingularConfigurationError(
            "control points are coincident or collinear; spline system is singular"
        )
    sol = np.linalg.solve(lhs, rhs)
    # One step of iterative refinement keeps interpolation residuals near
    # machine precision even for moderately conditioned systems.
    sol += np.linalg.solve(lhs, rhs - lhs @ sol)
    return TpsTransform(
        source_points=src,
        affine=sol[k:].T,
        weights=sol[:k],
        regularization=float(regularization),
    )


def eval_tps(transform: TpsTransform, points: np.ndarray) -> np.ndarray:
    """Evaluate the spline at an (M, 2) array (or a single (2,) point)."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    diff = pts[:, None, :] - transform.source_points[None, :, :]
    sq = (diff * diff).sum(axis=2)
    u = _kernel(sq)
    design = np.concatenate([np.ones((pts.shape[0], 1)), pts], axis=1)
    out = design @ transform.affine.T + u @ transform.weights
    return out[0] if single else out


def _pixel_centers(width: int, height: int) -> np.ndarray:
    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    return np.stack([cols.reshape(-1) + 0.5, rows.reshape(-1) + 0.5], axis=1)


def warp_image(
    img: ImageBuffer,
    source_landmarks: LandmarkSet,
    target_landmarks: LandmarkSet,
    regularization: float = 0.0,
) -> ImageBuffer:
    """Warp img so content at the source layout appears at the target layout.

    Backward mapping: a spline fitted from target to source sends each
    output pixel center to input coordinates, which are sampled bilinearly
    with edge clamping. Output size equals input size and values stay in
    [-1, 1] because bilinear weights are convex.
    """
    inverse = fit_tps(target_landmarks, source_landmarks, regularization)
    centers = _pixel_centers(img.width, img.height)
    mapped = eval_tps(inverse, centers)
    samples = bilinear_sample(img.data, mapped[:, 0] - 0.5, mapped[:, 1] - 0.5)
    return ImageBuffer(samples.reshape(img.height, img.width, img.channels))


def resample_with_transform(img: ImageBuffer, transform, size: tuple[int, int] | None = None) -> ImageBuffer:
    """Apply a similarity transform to an image by backward sampling.

    `transform` maps input coordinates to output coordinates; each output
    pixel center is pulled back through its inverse. `size` is (width,
    height) of the output, defaulting to the input size.
    """
    w, h = size if size is not None else (img.width, img.height)
    inv = transform.inverse()
    centers = _pixel_centers(w, h)
    mapped = inv.apply(centers)
    samples = bilinear_sample(img.data, mapped[:, 0] - 0.5, mapped[:, 1] - 0.5)
    return ImageBuffer(samples.reshape(h, w, img.channels))


def align_record(record: FaceRecord, frame: CanonicalFrame) -> FaceRecord:
    """Bring a record into the canonical frame (landmarks and pixels).

    If the fitted similarity is already the identity the pixels are passed
    through untouched, so records generated directly in the frame survive
    alignment bit for bit.
    """
    aligned, t = align_landmarks(record.landmarks, frame)
    if t.is_identity() and (record.image.width, record.image.height) == record_size(frame):
        image = record.image
        aligned = record.landmarks
    else:
        image = resample_with_transform(record.image, t, size=frame.image_size)
    return FaceRecord(
        image=image,
        landmarks=aligned,
        identity=record.identity,
        record_id=record.record_id,
        spec=record.spec,
        provenance=record.provenance,
    )


def record_size(frame: CanonicalFrame) -> tuple[int, int]:
    return (int(frame.image_size[0]), int(frame.image_size[1]))


def make_identical_face(
    record: FaceRecord,
    neighbor: FaceRecord,
    frame: CanonicalFrame,
    regularization: float = 0.0,
) -> FaceRecord:
    """Give the neighbor's pixels the query record's landmark layout.

    The neighbor image is spline-warped so its landmarks land on the query's
    landmarks, then the result is aligned to the canonical frame. The output
    keeps the neighbor's identity label (the pixels are still theirs);
    provenance records (query id, neighbor id). When the query is already
    frame-aligned the post-warp alignment is the identity and is skipped, so
    the output landmarks equal the query's exactly.
    """
    warped = warp_image(
        neighbor.image,
        source_landmarks=neighbor.landmarks,
        target_landmarks=record.landmarks,
        regularization=regularization,
    )
    aligned, t = align_landmarks(record.landmarks, frame)
    if t.is_identity() and (warped.width, warped.height) == record_size(frame):
        image = warped
        landmarks = record.landmarks
    else:
        image = resample_with_transform(warped, t, size=frame.image_size)
        landmarks = aligned
    qid = -1 if record.record_id is None else record.record_id
    nid = -1 if neighbor.record_id is None else neighbor.record_id
    return FaceRecord(
        image=image,
        landmarks=landmarks,
        identity=neighbor.identity,
        record_id=None,
        spec=neighbor.spec,
        provenance=(qid, nid),
    )
