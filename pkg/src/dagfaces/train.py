"""Triplet construction and SGD training of the split-embedding network.

For every training record the builder picks the geometrically closest face
of another identity from a sampled pool, warps that neighbor onto the
record's landmark layout, and stores the three faces plus their landmark
disparity. Training runs plain mini-batch SGD (no momentum, no weight
decay) against the combined loss with a stepwise-decaying learning rate.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    CanonicalFrame,
    IndexEntry,
    LandmarkSet,
    NeighborIndex,
    NoNeighborError,
    landmark_disparity,
    mean_reference_shape,
    read_landmark_file,
    select_geometric_neighbor,
    write_landmark_file,
)
from .images import load_image, save_image
from .losses import EmbeddingTriple, LossConfig, total_loss
from .net import ConfigurationError, NetConfig, NetParams, backward, forward, init_params
from .records import FaceRecord
from .seeding import STREAM_POOL, STREAM_SHUFFLE, keyed_rng
from .synth import DatasetManifest
from .tps import align_record, make_identical_face

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; the offending batch was dumped for inspection."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr_init: float = 0.1
    lr_decay: float = 0.9
    decay_interval_epochs: int = 5
    lr_floor: float = 1e-6
    epochs: int = 25
    seed: int = 0
    pool_size: int = 2000
    loss: LossConfig = field(default_factory=LossConfig)
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if not (0.0 < self.lr_decay < 1.0):
            raise ValueError("lr_decay must lie in (0, 1)")
        if self.decay_interval_epochs < 1:
            raise ValueError("decay_interval_epochs must be >= 1")
        # Zero rates are allowed as an explicit no-op-training escape hatch;
        # ordinary configs keep lr_init > lr_floor > 0.
        if self.lr_init < 0 or self.lr_floor < 0 or self.lr_init < self.lr_floor:
            raise ValueError("need lr_init >= lr_floor >= 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def to_dict(self) -> dict:
        return {
            "batch_size": int(self.batch_size),
            "lr_init": float(self.lr_init),
            "lr_decay": float(self.lr_decay),
            "decay_interval_epochs": int(self.decay_interval_epochs),
            "lr_floor": float(self.lr_floor),
            "epochs": int(self.epochs),
            "seed": int(self.seed),
            "pool_size": int(self.pool_size),
            "loss": self.loss.to_dict(),
            "net": self.net.to_dict(),
        }


@dataclass(frozen=True)
class TripletItem:
    """A training triplet: query face, its geometric neighbor, and the warp."""

    query: FaceRecord
    neighbor: FaceRecord
    warped: FaceRecord
    disparity: float

    def __post_init__(self) -> None:
        if self.query.identity == self.neighbor.identity:
            raise ValueError("query and neighbor must have different identities")
        gap = np.abs(self.warped.landmarks.points - self.query.landmarks.points).max()
        if gap > 1e-6:
            raise ValueError(f"warped landmarks deviate from the query's by {gap:g}")
        if self.disparity < 0:
            raise ValueError("disparity must be >= 0")


@dataclass(frozen=True)
class TripletSet:
    items: tuple[TripletItem, ...]
    frame: CanonicalFrame
    skipped: int

    def label_map(self) -> dict[int, int]:
        """Identity -> class index, sorted for determinism."""
        ids = sorted({t.query.identity for t in self.items} | {t.neighbor.identity for t in self.items})
        return {identity: idx for idx, identity in enumerate(ids)}


def build_triplets(
    manifest: DatasetManifest,
    pool_size: int,
    seed: int,
    split: str = "train",
    frame: CanonicalFrame | None = None,
) -> TripletSet:
    """Construct one triplet per record of the chosen split.

    Records are aligned to the canonical frame first (built from this
    split's landmarks unless a frame is supplied, so evaluation splits can
    reuse the training frame). The neighbor pool per record is a seeded
    sample of min(pool_size, available) different-identity records; records
    with no different-identity candidate are skipped and counted.
    """
    records = manifest.load_records(split)
    identities = {r.identity for r in records}
    if len(identities) < 2:
        raise ValueError(f"{split} split needs >= 2 identities, found {len(identities)}")
    if frame is None:
        size = (records[0].image.width, records[0].image.height)
        frame = mean_frame_of(records, size)
    aligned = [align_record(r, frame) for r in records]
    by_id = {r.record_id: r for r in aligned}

    items = []
    skipped = 0
    for rec in aligned:
        candidates = [r for r in aligned if r.identity != rec.identity]
        if not candidates:
            skipped += 1
            log.warning("record %s has no different-identity candidate; skipped", rec.record_id)
            continue
        n_pool = min(pool_size, len(candidates))
        positions = keyed_rng(STREAM_POOL, seed, rec.record_id).choice(
            len(candidates), size=n_pool, replace=False
        )
        entries = [
            IndexEntry(candidates[p].record_id, candidates[p].identity, candidates[p].landmarks)
            for p in sorted(positions)
        ]
        entries.append(IndexEntry(rec.record_id, rec.identity, rec.landmarks))
        try:
            neighbor_id = select_geometric_neighbor(rec.record_id, NeighborIndex(tuple(entries)))
        except NoNeighborError:
            skipped += 1
            log.warning("record %s found no eligible neighbor; skipped", rec.record_id)
            continue
        neighbor = by_id[neighbor_id]
        warped = make_identical_face(rec, neighbor, frame)
        items.append(
            TripletItem(
                query=rec,
                neighbor=neighbor,
                warped=warped,
                disparity=landmark_disparity(rec.landmarks, neighbor.landmarks),
            )
        )
    return TripletSet(items=tuple(items), frame=frame, skipped=skipped)


def mean_frame_of(records: list[FaceRecord], size: tuple[int, int]) -> CanonicalFrame:
    return mean_reference_shape([r.landmarks for r in records], size)


# ---------------------------------------------------------------------------
# Disk cache for triplets (images as 8-bit PGM, landmarks full precision).


def save_triplets(tset: TripletSet, out_dir) -> None:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    w, h = tset.frame.image_size
    with open(root / "frame.txt", "w", encoding="ascii") as fh:
        fh.write(f"{w} {h}\n")
        for u, v in tset.frame.reference_shape.points:
            fh.write(f"{float(u)!r} {float(v)!r}\n")

    aligned_rows = []
    seen = set()
    for item in tset.items:
        for rec in (item.query, item.neighbor):
            if rec.record_id in seen:
                continue
            seen.add(rec.record_id)
            save_image(rec.image, root / f"aligned_{rec.record_id:05d}.pgm")
            aligned_rows.append((rec.record_id, rec.identity, rec.landmarks))
    aligned_rows.sort(key=lambda r: r[0])
    write_landmark_file(root / "aligned_landmarks.txt", aligned_rows)

    with open(root / "triplets.csv", "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["query_id", "neighbor_id", "disparity", "warp_file", "skipped_total"])
        for item in tset.items:
            warp_file = f"warp_{item.query.record_id:05d}.pgm"
            save_image(item.warped.image, root / warp_file)
            writer.writerow(
                [
                    item.query.record_id,
                    item.neighbor.record_id,
                    repr(float(item.disparity)),
                    warp_file,
                    tset.skipped,
                ]
            )


def load_triplets(root) -> TripletSet:
    root = Path(root)
    frame_path = root / "frame.txt"
    if not frame_path.exists():
        raise FileNotFoundError(f"no triplet cache at {root}")
    with open(frame_path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    w, h = (int(x) for x in lines[0].split())
    ref = np.array([[float(a) for a in ln.split()] for ln in lines[1:]])
    frame = CanonicalFrame(LandmarkSet(ref), (w, h))

    marks = read_landmark_file(root / "aligned_landmarks.txt")
    aligned = {}
    for record_id, identity, ls in marks:
        aligned[record_id] = FaceRecord(
            image=load_image(root / f"aligned_{record_id:05d}.pgm"),
            landmarks=ls,
            identity=identity,
            record_id=record_id,
        )

    items = []
    skipped = 0
    with open(root / "triplets.csv", "r", encoding="ascii", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            qid, nid = int(row[0]), int(row[1])
            query, neighbor = aligned[qid], aligned[nid]
            warped = FaceRecord(
                image=load_image(root / row[3]),
                landmarks=query.landmarks,
                identity=neighbor.identity,
                provenance=(qid, nid),
            )
            items.append(
                TripletItem(query=query, neighbor=neighbor, warped=warped, disparity=float(row[2]))
            )
            skipped = int(row[4])
    return TripletSet(items=tuple(items), frame=frame, skipped=skipped)


# ---------------------------------------------------------------------------
# Optimization.


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Stepwise decay with a floor: rate never increases and never drops below it."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    rate = cfg.lr_init * cfg.lr_decay ** (epoch // cfg.decay_interval_epochs)
    return max(cfg.lr_floor, rate)


@dataclass(frozen=True)
class TrainResult:
    params: NetParams  # final
    best_params: NetParams
    best_epoch: int
    log: tuple[dict, ...]


_LOG_COLUMNS = (
    "epoch",
    "lr",
    "loss_total",
    "loss_id",
    "loss_app",
    "loss_geo",
    "mean_geo_cos",
    "mean_app_cos",
    "train_acc",
)


def train(cfg: TrainConfig, triplets: TripletSet, out_dir=None) -> TrainResult:
    """Mini-batch SGD over the triplet set.

    Per batch, all three faces go through one stacked forward pass; the
    combined loss supplies embedding gradients (identification on query and
    neighbor, appearance and geometry terms on the warp) and the classifier
    gradient. Every parameter, classifier included, takes the same SGD step.
    Logs one row per epoch; with an out_dir, writes train_log.csv plus final
    and best (by train accuracy) checkpoints.
    """
    label_map = triplets.label_map()
    if cfg.net.n_classes != len(label_map):
        raise ConfigurationError(
            f"net config expects {cfg.net.n_classes} classes, triplets have {len(label_map)}"
        )
    items = triplets.items
    if not items:
        raise ValueError("no triplets to train on")

    x_query = np.stack([t.query.image.plane() for t in items])[:, None]
    x_neighbor = np.stack([t.neighbor.image.plane() for t in items])[:, None]
    x_warped = np.stack([t.warped.image.plane() for t in items])[:, None]
    y_query = np.array([label_map[t.query.identity] for t in items], dtype=np.int64)
    y_neighbor = np.array([label_map[t.neighbor.identity] for t in items], dtype=np.int64)
    phi = np.array([t.disparity for t in items])

    params = init_params(cfg.net, cfg.seed)
    best_params = params.clone()
    best_epoch = 0
    best_acc = -1.0
    n_items = len(items)
    rows = []
    out_root = Path(out_dir) if out_dir is not None else None
    if out_root is not None:
        out_root.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = keyed_rng(STREAM_SHUFFLE, cfg.seed, epoch).permutation(n_items)
        sums = {k: 0.0 for k in ("total", "id", "app", "geo", "geo_cos", "app_cos")}
        hits = 0
        for start in range(0, n_items, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            b = idx.size
            stacked = np.concatenate([x_query[idx], x_neighbor[idx], x_warped[idx]])
            triple_all, _, cache = forward(params, stacked)
            query = EmbeddingTriple(
                triple_all.appearance[:b], triple_all.geometry[:b], triple_all.combined[:b]
            )
            neighbor = EmbeddingTriple(
                triple_all.appearance[b : 2 * b],
                triple_all.geometry[b : 2 * b],
                triple_all.combined[b : 2 * b],
            )
            warped = EmbeddingTriple(
                triple_all.appearance[2 * b :],
                triple_all.geometry[2 * b :],
                triple_all.combined[2 * b :],
            )
            result = total_loss(
                query,
                neighbor,
                warped,
                y_query[idx],
                y_neighbor[idx],
                phi[idx],
                params.classifier,
                cfg.loss,
            )
            if not np.isfinite(result.value):
                dump = None
                if out_root is not None:
                    dump = out_root / "diverged_batch.npz"
                    np.savez(
                        dump,
                        images=stacked,
                        labels_query=y_query[idx],
                        labels_neighbor=y_neighbor[idx],
                        disparity=phi[idx],
                        epoch=epoch,
                    )
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}"
                    + (f"; batch dumped to {dump}" if dump else "")
                )
            d_a = np.concatenate(
                [
                    result.d_query.d_appearance,
                    result.d_neighbor.d_appearance,
                    result.d_warped.d_appearance,
                ]
            )
            d_g = np.concatenate(
                [result.d_query.d_geometry, result.d_neighbor.d_geometry, result.d_warped.d_geometry]
            )
            d_z = np.concatenate(
                [result.d_query.d_combined, result.d_neighbor.d_combined, result.d_warped.d_combined]
            )
            grads, _ = backward(params, cache, (d_a, d_g, d_z))
            grads["classifier.w"] = grads["classifier.w"] + result.d_weights
            params.apply_update(grads, lr)

            sums["total"] += result.value * b
            sums["id"] += result.id_value * b
            sums["app"] += result.appearance_value * b
            sums["geo"] += result.geometry_value * b
            sums["geo_cos"] += result.mean_geo_cos * b
            sums["app_cos"] += result.mean_app_cos * b
            hits += result.train_hits

        acc = hits / (2 * n_items)
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss_total": sums["total"] / n_items,
            "loss_id": sums["id"] / n_items,
            "loss_app": sums["app"] / n_items,
            "loss_geo": sums["geo"] / n_items,
            "mean_geo_cos": sums["geo_cos"] / n_items,
            "mean_app_cos": sums["app_cos"] / n_items,
            "train_acc": acc,
        }
        rows.append(row)
        if acc > best_acc:
            best_acc = acc
            best_epoch = epoch
            best_params = params.clone()

    if out_root is not None:
        with open(out_root / "train_log.csv", "w", encoding="ascii", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(_LOG_COLUMNS)
            for row in rows:
                writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in _LOG_COLUMNS[1:]])
        params.save(out_root / "checkpoint_final.bin")
        best_params.save(out_root / "checkpoint_best.bin")
    return TrainResult(params=params, best_params=best_params, best_epoch=best_epoch, log=tuple(rows))
