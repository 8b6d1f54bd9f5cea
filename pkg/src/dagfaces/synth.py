"""Procedural face-like images with exact ground-truth landmarks.

Each identity is a draw of geometry factors (where the parts sit) and
appearance factors (how they are shaded). Renders of one identity share the
factors exactly and differ only by small per-render jitter and noise, so
identity, geometry, and appearance all have usable ground truth. Landmark
positions come from the same placement equations that position the drawing
primitives; they are exact, never estimated from pixels.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import LandmarkSet, read_landmark_file, write_landmark_file
from .images import ImageBuffer, load_image, save_image
from .records import FaceRecord
from .seeding import (
    STREAM_IDENTITY,
    STREAM_JITTER,
    STREAM_NOISE,
    STREAM_SPLIT,
    keyed_rng,
)

GEO_FACTORS = ("eye_spacing", "eye_height", "nose_length", "mouth_width", "face_aspect")
# Semantic ranges, all fractions of the image side. Chosen so every part
# stays inside the face outline and every landmark inside the image for any
# factor combination plus maximal jitter.
GEO_RANGES: dict[str, tuple[float, float]] = {
    "eye_spacing": (0.24, 0.40),  # distance between eye centers
    "eye_height": (0.08, 0.18),  # eye line above face center
    "nose_length": (0.10, 0.22),  # bridge-to-tip drop
    "mouth_width": (0.22, 0.40),  # corner-to-corner distance
    "face_aspect": (0.40, 0.47),  # outline semi-height
}
APP_FACTORS = ("base_level", "part_contrast", "texture_freq", "texture_phase")
ATTR_THRESHOLD = 0.5

LANDMARK_NAMES = (
    "left_eye_outer",
    "left_eye_inner",
    "right_eye_inner",
    "right_eye_outer",
    "nose_bridge",
    "nose_tip",
    "mouth_left",
    "mouth_right",
    "outline_top",
    "outline_right",
    "outline_bottom",
    "outline_left",
)

# Fixed placement constants (fractions of the image side).
_EYE_CORNER_RATIO = 0.25  # corner offset relative to half the eye spacing
_NOSE_BRIDGE_DROP = 0.04
_MOUTH_DROP = 0.20
_OUTLINE_HALF_WIDTH = 0.34
_POSE_JITTER = 0.015  # max translation jitter per axis
_BEND_JITTER = 0.02  # max mouth-curve bend (expression), pixels only

_BACKGROUND = -0.9
_TEXTURE_AMP = 0.10
_EDGE_SOFTNESS = 1.0  # anti-alias band in pixels


@dataclass(frozen=True)
class IdentitySpec:
    """Ground-truth factors for one identity.

    geo_latent holds the semantic fractions (GEO_RANGES order), app_latent
    holds unitless values in [0, 1] (APP_FACTORS order), and attributes are
    the app factors thresholded at ATTR_THRESHOLD.
    """

    identity: int
    geo_latent: np.ndarray
    app_latent: np.ndarray
    attributes: np.ndarray

    def __post_init__(self) -> None:
        geo = np.array(self.geo_latent, dtype=np.float64)
        app = np.array(self.app_latent, dtype=np.float64)
        attr = np.array(self.attributes, dtype=bool)
        if geo.shape != (len(GEO_FACTORS),):
            raise ValueError(f"geo_latent must have {len(GEO_FACTORS)} entries")
        if app.shape != (len(APP_FACTORS),):
            raise ValueError(f"app_latent must have {len(APP_FACTORS)} entries")
        if attr.shape != app.shape:
            raise ValueError("attributes must mirror app_latent")
        for name, value in zip(GEO_FACTORS, geo):
            lo, hi = GEO_RANGES[name]
            if not (lo <= value <= hi):
                raise ValueError(f"{name}={value:g} outside its range [{lo}, {hi}]")
        if app.min() < 0.0 or app.max() > 1.0:
            raise ValueError("app_latent values must lie in [0, 1]")
        if not np.array_equal(attr, app >= ATTR_THRESHOLD):
            raise ValueError("attributes must equal app_latent >= threshold")
        geo.setflags(write=False)
        app.setflags(write=False)
        attr.setflags(write=False)
        object.__setattr__(self, "geo_latent", geo)
        object.__setattr__(self, "app_latent", app)
        object.__setattr__(self, "attributes", attr)


def sample_identity(seed: int, identity: int) -> IdentitySpec:
    """Deterministic factor draw keyed by (seed, identity)."""
    rng = keyed_rng(STREAM_IDENTITY, seed, identity)
    raw_geo = rng.uniform(size=len(GEO_FACTORS))
    app = rng.uniform(size=len(APP_FACTORS))
    geo = np.array(
        [lo + (hi - lo) * r for (lo, hi), r in zip((GEO_RANGES[f] for f in GEO_FACTORS), raw_geo)]
    )
    return IdentitySpec(
        identity=identity,
        geo_latent=geo,
        app_latent=app,
        attributes=app >= ATTR_THRESHOLD,
    )


def placement_landmarks(
    geo_latent: np.ndarray, image_size: int, jitter: tuple[float, float] = (0.0, 0.0)
) -> np.ndarray:
    """Landmark coordinates implied by the geometry factors, (12, 2).

    Affine in geo_latent and in the jitter translation by construction; the
    renderer uses exactly this function, so reported landmarks are exact.
    """
    es, eh, nl, mw, fa = np.asarray(geo_latent, dtype=np.float64)
    w = float(image_size)
    cx = w / 2.0 + jitter[0]
    cy = w / 2.0 + jitter[1]
    y_eye = cy - eh * w
    eye_out = (es / 2.0) * (1.0 + _EYE_CORNER_RATIO) * w
    eye_in = (es / 2.0) * (1.0 - _EYE_CORNER_RATIO) * w
    y_bridge = y_eye + _NOSE_BRIDGE_DROP * w
    y_tip = y_bridge + nl * w
    y_mouth = cy + _MOUTH_DROP * w
    half_mouth = (mw / 2.0) * w
    rx = _OUTLINE_HALF_WIDTH * w
    ry = fa * w
    return np.array(
        [
            [cx - eye_out, y_eye],
            [cx - eye_in, y_eye],
            [cx + eye_in, y_eye],
            [cx + eye_out, y_eye],
            [cx, y_bridge],
            [cx, y_tip],
            [cx - half_mouth, y_mouth],
            [cx + half_mouth, y_mouth],
            [cx, cy - ry],
            [cx + rx, cy],
            [cx, cy + ry],
            [cx - rx, cy],
        ]
    )


def _soft_mask(signed_dist: np.ndarray) -> np.ndarray:
    # Coverage ramps from 1 inside to 0 outside over the softness band.
    return np.clip(0.5 - signed_dist / _EDGE_SOFTNESS, 0.0, 1.0)


def _ellipse_mask(u, v, cx, cy, rx, ry):
    # Signed distance approximated radially; adequate for mild eccentricity.
    q = np.sqrt(((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2)
    return _soft_mask((q - 1.0) * min(rx, ry))


def _segment_mask(u, v, p0, p1, thickness):
    d = np.asarray(p1, dtype=np.float64) - np.asarray(p0, dtype=np.float64)
    len_sq = float(d @ d)
    pu = u - p0[0]
    pv = v - p0[1]
    t = np.clip((pu * d[0] + pv * d[1]) / len_sq, 0.0, 1.0) if len_sq > 0 else 0.0
    dist = np.sqrt((pu - t * d[0]) ** 2 + (pv - t * d[1]) ** 2)
    return _soft_mask(dist - thickness)


def _curve_mask(u, v, p0, mid, p1, thickness, samples=48):
    # Quadratic Bezier sampled densely; coverage from min distance.
    t = np.linspace(0.0, 1.0, samples)[:, None, None]
    ctrl = 2.0 * np.asarray(mid) - 0.5 * (np.asarray(p0) + np.asarray(p1))
    bx = (1 - t) ** 2 * p0[0] + 2 * (1 - t) * t * ctrl[0] + t**2 * p1[0]
    by = (1 - t) ** 2 * p0[1] + 2 * (1 - t) * t * ctrl[1] + t**2 * p1[1]
    dist = np.sqrt((u[None] - bx) ** 2 + (v[None] - by) ** 2).min(axis=0)
    return _soft_mask(dist - thickness)


def render_face(
    spec: IdentitySpec,
    jitter_seed: int,
    noise_level: float,
    image_size: int = 32,
) -> FaceRecord:
    """Render one face; pure in (spec, jitter_seed, noise_level, image_size).

    Geometry factors place the primitives, appearance factors shade them:
    base_level lifts the skin tone, part_contrast darkens eyes/nose/mouth
    relative to skin, texture_freq/texture_phase control a diagonal
    sinusoidal grain on the skin. Uniform noise of the given amplitude is
    added last and the result clipped to [-1, 1].
    """
    if not (0.0 <= noise_level <= 0.5):
        raise ValueError(f"noise_level must be in [0, 0.5], got {noise_level}")
    w = int(image_size)
    jrng = keyed_rng(STREAM_JITTER, jitter_seed)
    jx, jy = jrng.uniform(-_POSE_JITTER * w, _POSE_JITTER * w, size=2)
    bend = jrng.uniform(-_BEND_JITTER * w, _BEND_JITTER * w)

    pts = placement_landmarks(spec.geo_latent, w, (jx, jy))
    es, eh, nl, mw, fa = spec.geo_latent
    base, contrast, tfreq, tphase = spec.app_latent
    cx = w / 2.0 + jx
    cy = w / 2.0 + jy

    cols, rows = np.meshgrid(np.arange(w), np.arange(w))
    u = cols + 0.5
    v = rows + 0.5

    skin_level = 0.0 + 0.5 * base
    part_level = skin_level - (0.45 + 0.5 * contrast)
    cycles = 1.0 + 5.0 * tfreq
    texture = _TEXTURE_AMP * np.sin(
        2.0 * np.pi * (cycles * (u + v) / (2.0 * w) + tphase)
    )

    img = np.full((w, w), _BACKGROUND)
    face = _ellipse_mask(u, v, cx, cy, _OUTLINE_HALF_WIDTH * w, fa * w)
    img = img + face * (skin_level + texture - img)

    eye_rx = (es / 2.0) * _EYE_CORNER_RATIO * w
    eye_ry = 0.45 * eye_rx
    y_eye = cy - eh * w
    parts = [
        _ellipse_mask(u, v, cx - (es / 2.0) * w, y_eye, eye_rx, eye_ry),
        _ellipse_mask(u, v, cx + (es / 2.0) * w, y_eye, eye_rx, eye_ry),
        _segment_mask(u, v, pts[4], pts[5], 0.020 * w),
        _curve_mask(u, v, pts[6], (cx, cy + _MOUTH_DROP * w + bend), pts[7], 0.022 * w),
    ]
    for mask in parts:
        img = img + mask * (part_level - img)

    if noise_level > 0.0:
        nrng = keyed_rng(STREAM_NOISE, jitter_seed)
        img = img + nrng.uniform(-noise_level, noise_level, size=img.shape)
    img = np.clip(img, -1.0, 1.0)
    return FaceRecord(
        image=ImageBuffer(img),
        landmarks=LandmarkSet(pts),
        identity=spec.identity,
        spec=spec,
    )


@dataclass(frozen=True)
class ManifestRow:
    record_id: int
    identity: int
    split: str  # "train" or "test"
    filename: str
    geo_latent: tuple[float, ...]
    app_latent: tuple[float, ...]
    attributes: tuple[int, ...]


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    rows: tuple[ManifestRow, ...]

    def rows_for(self, split: str | None = None) -> tuple[ManifestRow, ...]:
        if split is None:
            return self.rows
        return tuple(r for r in self.rows if r.split == split)

    def identities(self, split: str | None = None) -> tuple[int, ...]:
        return tuple(sorted({r.identity for r in self.rows_for(split)}))

    def load_records(self, split: str | None = None) -> list[FaceRecord]:
        """Load images and landmarks for the requested split, id order."""
        marks = {rid: ls for rid, _, ls in read_landmark_file(self.root / "landmarks.txt")}
        records = []
        for row in sorted(self.rows_for(split), key=lambda r: r.record_id):
            img = load_image(self.root / row.filename)
            spec = IdentitySpec(
                identity=row.identity,
                geo_latent=np.array(row.geo_latent),
                app_latent=np.array(row.app_latent),
                attributes=np.array(row.app_latent) >= ATTR_THRESHOLD,
            )
            records.append(
                FaceRecord(
                    image=img,
                    landmarks=marks[row.record_id],
                    identity=row.identity,
                    record_id=row.record_id,
                    spec=spec,
                )
            )
        return records


_MANIFEST_HEADER = (
    ["record_id", "identity", "split", "filename"]
    + [f"geo_{f}" for f in GEO_FACTORS]
    + [f"app_{f}" for f in APP_FACTORS]
    + [f"attr_{f}" for f in APP_FACTORS]
)


def _jitter_seed(seed: int, record_id: int) -> int:
    # Disjoint per (seed, record) at any desk-scale record count.
    return seed * 1_000_003 + record_id


def thread_count() -> int:
    """Worker count from the DAG_THREADS environment variable (default 1)."""
    raw = os.environ.get("DAG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"DAG_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


def generate_dataset(
    n_identities: int,
    per_identity: int,
    seed: int,
    out_dir,
    image_size: int = 32,
    noise_level: float = 0.02,
) -> DatasetManifest:
    """Render a dataset to out_dir and return its manifest.

    Identities (not individual images) are assigned to train/test at an
    80/20 ratio, so test identities are never seen in training. Output is
    one PGM per record, a landmark file, and manifest.csv; all bytes are a
    pure function of the arguments.
    """
    if n_identities < 2 or per_identity < 2:
        raise ValueError("need at least 2 identities and 2 images per identity")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)

    perm = keyed_rng(STREAM_SPLIT, seed).permutation(n_identities)
    n_train = max(1, min(n_identities - 1, int(0.8 * n_identities + 0.5)))
    train_ids = set(int(i) for i in perm[:n_train])

    specs = [sample_identity(seed, i) for i in range(n_identities)]
    jobs = [
        (i * per_identity + j, specs[i])
        for i in range(n_identities)
        for j in range(per_identity)
    ]

    def render(job):
        record_id, spec = job
        rec = render_face(spec, _jitter_seed(seed, record_id), noise_level, image_size)
        return record_id, rec

    workers = thread_count()
    if workers > 1:
        with cf.ThreadPoolExecutor(max_workers=workers) as pool:
            rendered = list(pool.map(render, jobs))
    else:
        rendered = [render(j) for j in jobs]

    rows = []
    mark_rows = []
    for record_id, rec in rendered:
        filename = f"face_{record_id:05d}.pgm"
        save_image(rec.image, root / filename)
        mark_rows.append((record_id, rec.identity, rec.landmarks))
        spec = rec.spec
        rows.append(
            ManifestRow(
                record_id=record_id,
                identity=rec.identity,
                split="train" if rec.identity in train_ids else "test",
                filename=filename,
                geo_latent=tuple(float(x) for x in spec.geo_latent),
                app_latent=tuple(float(x) for x in spec.app_latent),
                attributes=tuple(int(x) for x in spec.attributes),
            )
        )
    write_landmark_file(root / "landmarks.txt", mark_rows)
    with open(root / "manifest.csv", "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_MANIFEST_HEADER)
        for r in rows:
            writer.writerow(
                [r.record_id, r.identity, r.split, r.filename]
                + [repr(x) for x in r.geo_latent]
                + [repr(x) for x in r.app_latent]
                + list(r.attributes)
            )
    return DatasetManifest(root=root, rows=tuple(rows))


def load_dataset(root) -> DatasetManifest:
    """Read manifest.csv back into a DatasetManifest."""
    root = Path(root)
    path = root / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    rows = []
    with open(path, "r", encoding="ascii", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _MANIFEST_HEADER:
            raise ValueError(f"{path}: unexpected manifest columns")
        g = len(GEO_FACTORS)
        a = len(APP_FACTORS)
        for rec in reader:
            rows.append(
                ManifestRow(
                    record_id=int(rec[0]),
                    identity=int(rec[1]),
                    split=rec[2],
                    filename=rec[3],
                    geo_latent=tuple(float(x) for x in rec[4 : 4 + g]),
                    app_latent=tuple(float(x) for x in rec[4 + g : 4 + g + a]),
                    attributes=tuple(int(x) for x in rec[4 + g + a :]),
                )
            )
    return DatasetManifest(root=root, rows=tuple(rows))
