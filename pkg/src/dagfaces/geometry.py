"""Landmark sets, similarity alignment, and geometric neighbor search.

Coordinates are pixel units, x to the right and y down. A landmark set is
an ordered list of K points; index j means the same facial feature in every
set, so distances between sets are only defined for equal K. Whenever a set
is treated as a single vector the layout is (u_1, v_1, u_2, v_2, ...).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Squared spread below which a shape is considered to have collapsed to a
# point. Coordinates are pixel scale, so anything near this is degenerate.
_MIN_SPREAD_SQ = 1e-18


class DegenerateShapeError(ValueError):
    """Landmark set has (near-)zero spread about its centroid."""


class NoNeighborError(LookupError):
    """No candidate with a different identity exists in the index."""


@dataclass(frozen=True)
class LandmarkSet:
    """Ordered K x 2 array of landmark locations, immutable after construction."""

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"landmark array must have shape (K, 2), got {pts.shape}")
        if pts.shape[0] < 3:
            raise ValueError(f"need at least 3 landmarks, got {pts.shape[0]}")
        if not np.isfinite(pts).all():
            raise ValueError("landmark coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def k(self) -> int:
        return int(self.points.shape[0])

    def vectorized(self) -> np.ndarray:
        """Flatten to (2K,) in (u_1, v_1, u_2, v_2, ...) order."""
        return self.points.reshape(-1)

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def spread(self) -> float:
        """l2 norm of the centered shape, the scale used by disparity."""
        return float(np.linalg.norm(self.points - self.centroid()))


@dataclass(frozen=True)
class SimilarityTransform:
    """Rotation + isotropic scale + translation in the 4-parameter linear form.

    Maps (u, v) to (a*u - b*v + tx, b*u + a*v + ty). The matrix [[a, -b],
    [b, a]] equals scale * rotation, so the family is closed under inversion
    and cannot produce reflections.
    """

    a: float
    b: float
    tx: float
    ty: float

    @property
    def scale(self) -> float:
        return math.hypot(self.a, self.b)

    @property
    def rotation(self) -> float:
        """Rotation angle in radians."""
        return math.atan2(self.b, self.a)

    def matrix(self) -> np.ndarray:
        """Linear part as a 2x2 array."""
        return np.array([[self.a, -self.b], [self.b, self.a]], dtype=np.float64)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 2) array (or a single (2,) point)."""
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        out = pts @ self.matrix().T + np.array([self.tx, self.ty])
        return out[0] if single else out

    def inverse(self) -> "SimilarityTransform":
        s2 = self.a * self.a + self.b * self.b
        if s2 <= _MIN_SPREAD_SQ:
            raise ValueError("similarity transform with zero scale is not invertible")
        ia = self.a / s2
        ib = -self.b / s2
        itx = -(ia * self.tx - ib * self.ty)
        ity = -(ib * self.tx + ia * self.ty)
        return SimilarityTransform(ia, ib, itx, ity)

    def is_identity(self, tol: float = 1e-9) -> bool:
        return (
            abs(self.a - 1.0) <= tol
            and abs(self.b) <= tol
            and abs(self.tx) <= tol
            and abs(self.ty) <= tol
        )


@dataclass(frozen=True)
class CanonicalFrame:
    """Reference landmark layout tied to a fixed output image size."""

    reference_shape: LandmarkSet
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self) -> None:
        w, h = self.image_size
        if w < 1 or h < 1:
            raise ValueError(f"image size must be positive, got {self.image_size}")
        center = np.array([w / 2.0, h / 2.0])
        off = np.abs(self.reference_shape.centroid() - center).max()
        if off > 1e-9:
            raise ValueError(
                f"reference shape centroid must sit at the frame center, off by {off:g}"
            )

    @property
    def center(self) -> np.ndarray:
        w, h = self.image_size
        return np.array([w / 2.0, h / 2.0])


def _fit_similarity(src: np.ndarray, dst: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity mapping src onto dst (both (K, 2))."""
    mx = src.mean(axis=0)
    my = dst.mean(axis=0)
    xc = src - mx
    yc = dst - my
    sxx = float((xc * xc).sum())
    if sxx <= _MIN_SPREAD_SQ:
        raise DegenerateShapeError("source shape has zero spread; similarity fit is undefined")
    # Closed-form normal equations of the centered 4-parameter system.
    sa = float((xc * yc).sum())
    sb = float((xc[:, 0] * yc[:, 1] - xc[:, 1] * yc[:, 0]).sum())
    a = sa / sxx
    b = sb / sxx
    tx = my[0] - (a * mx[0] - b * mx[1])
    ty = my[1] - (b * mx[0] + a * mx[1])
    return SimilarityTransform(a, b, tx, ty)


def align_landmarks(
    landmarks: LandmarkSet, frame: CanonicalFrame
) -> tuple[LandmarkSet, SimilarityTransform]:
    """Fit the similarity that best maps `landmarks` onto the frame reference.

    Returns the transformed landmark set together with the transform itself
    (original coordinates in, frame coordinates out).

    Raises
    ------
    DegenerateShapeError
        If the input shape has zero spread about its centroid.
    ValueError
        If the landmark counts disagree.
    """
    ref = frame.reference_shape
    if landmarks.k != ref.k:
        raise ValueError(f"landmark count mismatch: {landmarks.k} vs reference {ref.k}")
    t = _fit_similarity(landmarks.points, ref.points)
    return LandmarkSet(t.apply(landmarks.points)), t


def mean_reference_shape(
    sets: list[LandmarkSet] | tuple[LandmarkSet, ...],
    image_size: tuple[int, int],
    iterations: int = 5,
) -> CanonicalFrame:
    """Generalized Procrustes mean of the given sets, recentered on the frame.

    Alternates aligning every set to the current mean with re-estimating the
    mean, for a fixed number of iterations, then shifts the mean's centroid
    to the image center so the result satisfies the CanonicalFrame contract.
    """
    if not sets:
        raise ValueError("need at least one landmark set")
    k = sets[0].k
    for s in sets:
        if s.k != k:
            raise ValueError("all landmark sets must share the same K")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    w, h = image_size
    center = np.array([w / 2.0, h / 2.0])

    stack = np.stack([s.points for s in sets])
    ref = stack.mean(axis=0)
    ref = ref - ref.mean(axis=0) + center
    for _ in range(iterations):
        aligned = np.empty_like(stack)
        for i in range(stack.shape[0]):
            t = _fit_similarity(stack[i], ref)
            aligned[i] = t.apply(stack[i])
        ref = aligned.mean(axis=0)
        ref = ref - ref.mean(axis=0) + center
    return CanonicalFrame(LandmarkSet(ref), (int(w), int(h)))


def landmark_disparity(l_a: LandmarkSet, l_b: LandmarkSet) -> float:
    """Scale-free geometric disparity between two aligned landmark sets.

    The l2 distance between the vectorized sets, divided by the l2 spread of
    the first set about its own centroid. Zero iff the sets coincide.

    Raises
    ------
    DegenerateShapeError
        If the first set has zero spread (the normalizer would vanish).
    ValueError
        If the landmark counts disagree.
    """
    if l_a.k != l_b.k:
        raise ValueError(f"landmark count mismatch: {l_a.k} vs {l_b.k}")
    denom = l_a.spread()
    if denom * denom <= _MIN_SPREAD_SQ:
        raise DegenerateShapeError("first landmark set has zero spread; disparity undefined")
    num = float(np.linalg.norm(l_a.vectorized() - l_b.vectorized()))
    return num / denom


@dataclass(frozen=True)
class IndexEntry:
    record_id: int
    identity: int
    landmarks: LandmarkSet


@dataclass(frozen=True)
class NeighborIndex:
    """Pool of aligned candidate records for geometric neighbor search."""

    entries: tuple[IndexEntry, ...]
    epsilon: float = 1e-6

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("neighbor index must contain at least one entry")
        if not (0.0 < self.epsilon <= 1e-2):
            raise ValueError(f"epsilon must be a small positive number, got {self.epsilon}")
        k = self.entries[0].landmarks.k
        for e in self.entries:
            if e.landmarks.k != k:
                raise ValueError("all index entries must share the same landmark count")
        ids = [e.record_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("record ids in a neighbor index must be unique")

    def entry(self, record_id: int) -> IndexEntry:
        for e in self.entries:
            if e.record_id == record_id:
                return e
        raise KeyError(f"record {record_id} not in index")


def select_geometric_neighbor(query_id: int, index: NeighborIndex) -> int:
    """Record id of the geometrically closest candidate of another identity.

    Distance is the Chebyshev norm on vectorized landmarks, scaled by
    1 / (1 + epsilon). Same-identity candidates are never eligible, which
    matches the limiting behavior of an identity-indicator denominator as
    epsilon goes to zero while staying robust to duplicate landmark sets
    within an identity. Ties break toward the lowest record id.

    Raises
    ------
    NoNeighborError
        If every other entry shares the query's identity.
    KeyError
        If the query id is not in the index.
    """
    query = index.entry(query_id)
    qvec = query.landmarks.vectorized()
    best_id = -1
    best_obj = math.inf
    for e in index.entries:
        if e.record_id == query_id or e.identity == query.identity:
            continue
        d = float(np.abs(e.landmarks.vectorized() - qvec).max())
        obj = d / (1.0 + index.epsilon)
        if obj < best_obj or (obj == best_obj and e.record_id < best_id):
            best_obj = obj
            best_id = e.record_id
    if best_id < 0:
        raise NoNeighborError(f"no different-identity candidate for record {query_id}")
    return best_id


def write_landmark_file(
    path,
    rows: list[tuple[int, int, LandmarkSet]],
) -> None:
    """Write landmark rows as `record_id,identity,u_1,v_1,...` under a `#K=` header.

    Coordinates are written with shortest round-trip float formatting, so a
    read-back reproduces the arrays bit for bit.
    """
    if not rows:
        raise ValueError("refusing to write an empty landmark file")
    k = rows[0][2].k
    lines = [f"#K={k}"]
    for record_id, identity, ls in rows:
        if ls.k != k:
            raise ValueError("all rows in a landmark file must share the same K")
        coords = ",".join(repr(float(c)) for c in ls.vectorized())
        lines.append(f"{int(record_id)},{int(identity)},{coords}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_landmark_file(path) -> list[tuple[int, int, LandmarkSet]]:
    """Inverse of write_landmark_file. Validates the header against each row."""
    with open(path, "r", encoding="ascii") as fh:
        raw = [ln.strip() for ln in fh if ln.strip()]
    if not raw or not raw[0].startswith("#K="):
        raise ValueError(f"{path}: missing #K= header")
    k = int(raw[0][3:])
    rows: list[tuple[int, int, LandmarkSet]] = []
    for ln in raw[1:]:
        parts = ln.split(",")
        if len(parts) != 2 + 2 * k:
            raise ValueError(f"{path}: row has {len(parts)} fields, expected {2 + 2 * k}")
        record_id = int(parts[0])
        identity = int(parts[1])
        coords = np.array([float(p) for p in parts[2:]], dtype=np.float64).reshape(k, 2)
        rows.append((record_id, identity, LandmarkSet(coords)))
    return rows
