"""Evaluation metrics over frozen embeddings.

Verification (ROC, TAR at fixed FAR, k-fold best-threshold accuracy),
closed-set rank-1 identification, linear probes from embeddings to the
generator's ground-truth factors, nearest-neighbor retrieval with contact
sheets, a weight-grid sweep, and per-attribute linear classification.
Everything is deterministic given (checkpoint, dataset, seed); plots are
rendered headless and written as SVG with stable bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import CanonicalFrame
from .images import ImageBuffer, save_image, tile_grid
from .net import NetParams, forward
from .records import FaceRecord
from .seeding import STREAM_FOLDS, STREAM_PAIRS, STREAM_PERMUTE, keyed_rng
from .synth import APP_FACTORS, DatasetManifest, GEO_FACTORS
from .tps import align_record
from .train import TrainConfig, TripletSet, build_triplets, train

log = logging.getLogger(__name__)

FAR_TARGETS = (1e-2, 1e-3)
REPRESENTATIONS = ("appearance", "geometry", "combined")


class InsufficientPairsError(ValueError):
    """Verification needs at least one genuine and one impostor pair."""


# ---------------------------------------------------------------------------
# Embedding plumbing.


def _unit_rows(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    norms = np.linalg.norm(arr, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    return arr / safe[:, None]


def embed_records(
    params: NetParams, records: Sequence[FaceRecord], batch_size: int = 64
) -> dict[str, np.ndarray]:
    """Run the network over records in batches; returns one matrix per head."""
    if not records:
        raise ValueError("no records to embed")
    chunks: dict[str, list[np.ndarray]] = {k: [] for k in REPRESENTATIONS}
    for start in range(0, len(records), batch_size):
        batch = records[start : start + batch_size]
        x = np.stack([r.image.plane() for r in batch])[:, None]
        triple, _, _ = forward(params, x)
        chunks["appearance"].append(triple.appearance)
        chunks["geometry"].append(triple.geometry)
        chunks["combined"].append(triple.combined)
    return {k: np.concatenate(v) for k, v in chunks.items()}


def pair_scores(embeddings: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    """Cosine similarity for index pairs (M, 2) over an (N, d) matrix."""
    unit = _unit_rows(embeddings)
    pairs = np.asarray(pairs, dtype=np.int64)
    return np.sum(unit[pairs[:, 0]] * unit[pairs[:, 1]], axis=1)


# ---------------------------------------------------------------------------
# Verification: pair lists, ROC, TAR@FAR, k-fold accuracy.


@dataclass(frozen=True)
class VerificationPairs:
    """Index pairs into one record list; genuine = same identity."""

    genuine: np.ndarray  # (M, 2) int
    impostor: np.ndarray  # (M', 2) int


def make_verification_pairs(labels: Sequence[int], seed: int) -> VerificationPairs:
    """All genuine pairs plus an equal-size seeded impostor sample.

    The impostor sample is drawn without replacement from all cross-identity
    pairs; if fewer exist than genuine pairs, all of them are used.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if n < 2:
        raise InsufficientPairsError("need at least two records to form pairs")
    ii, jj = np.triu_indices(n, k=1)
    same = labels[ii] == labels[jj]
    genuine = np.column_stack([ii[same], jj[same]])
    cross = np.column_stack([ii[~same], jj[~same]])
    if genuine.shape[0] == 0 or cross.shape[0] == 0:
        raise InsufficientPairsError("need at least one genuine and one impostor pair")
    take = min(genuine.shape[0], cross.shape[0])
    picks = keyed_rng(STREAM_PAIRS, seed).choice(cross.shape[0], size=take, replace=False)
    return VerificationPairs(genuine=genuine, impostor=cross[np.sort(picks)])


@dataclass(frozen=True)
class RocCurve:
    """Strict-threshold ROC: a pair is accepted iff score > threshold.

    Points are ordered by descending threshold, so FAR and TAR are both
    non-decreasing along the curve. The final threshold is -inf, giving the
    (1, 1) endpoint; the first (the maximum observed score) gives FAR 0.
    """

    thresholds: np.ndarray
    far: np.ndarray
    tar: np.ndarray

    def tar_at_far(self, target: float) -> float:
        """Highest TAR among operating points with FAR <= target."""
        mask = self.far <= target
        if not mask.any():
            return 0.0
        return float(self.tar[mask].max())


def verification_roc(genuine_scores: np.ndarray, impostor_scores: np.ndarray) -> RocCurve:
    gen = np.asarray(genuine_scores, dtype=np.float64).ravel()
    imp = np.asarray(impostor_scores, dtype=np.float64).ravel()
    if gen.size == 0 or imp.size == 0:
        raise InsufficientPairsError("need at least one genuine and one impostor score")
    if not (np.isfinite(gen).all() and np.isfinite(imp).all()):
        raise ValueError("scores must be finite")
    thresholds = np.concatenate([np.unique(np.concatenate([gen, imp]))[::-1], [-np.inf]])
    gen_sorted = np.sort(gen)
    imp_sorted = np.sort(imp)
    # count(score > t) via right-bisection on the sorted score list
    tar = 1.0 - np.searchsorted(gen_sorted, thresholds, side="right") / gen.size
    far = 1.0 - np.searchsorted(imp_sorted, thresholds, side="right") / imp.size
    return RocCurve(thresholds=thresholds, far=far, tar=tar)


def verification_accuracy(
    scores: np.ndarray, genuine_mask: np.ndarray, folds: int = 10, seed: int = 0
) -> float:
    """k-fold accuracy with the accept threshold tuned on the other folds.

    For each fold, the threshold maximizing accuracy of the rule
    (score > threshold) on the remaining folds is chosen (ties -> lowest
    threshold) and applied to the held-out fold; fold accuracies are
    averaged.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    genuine = np.asarray(genuine_mask, dtype=bool).ravel()
    if scores.shape != genuine.shape:
        raise ValueError("scores and labels must align")
    n = scores.size
    if folds < 2 or n < folds:
        raise ValueError("need at least `folds` scored pairs")
    order = keyed_rng(STREAM_FOLDS, seed, 0).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = np.arange(n) % folds

    accs = []
    for f in range(folds):
        te = fold_of == f
        tr = ~te
        candidates = np.concatenate([[-np.inf], np.unique(scores[tr])])
        gen_sorted = np.sort(scores[tr][genuine[tr]])
        imp_sorted = np.sort(scores[tr][~genuine[tr]])
        accept_gen = gen_sorted.size - np.searchsorted(gen_sorted, candidates, side="right")
        reject_imp = np.searchsorted(imp_sorted, candidates, side="right")
        best = candidates[np.argmax(accept_gen + reject_imp)]
        accs.append(np.mean((scores[te] > best) == genuine[te]))
    return float(np.mean(accs))


# ---------------------------------------------------------------------------
# Closed-set identification.


def rank1_identification(
    gallery: np.ndarray,
    gallery_labels: Sequence[int],
    probes: np.ndarray,
    probe_labels: Sequence[int],
    exclude_self: bool = False,
) -> float:
    """Fraction of probes whose cosine-nearest gallery entry shares the label.

    Ties pick the lowest gallery index. With exclude_self=True the probe set
    must be the gallery itself (row i may not match entry i).
    """
    g_labels = np.asarray(gallery_labels, dtype=np.int64)
    p_labels = np.asarray(probe_labels, dtype=np.int64)
    if g_labels.size == 0:
        raise ValueError("gallery must be non-empty")
    if p_labels.size == 0:
        raise ValueError("probe set must be non-empty")
    missing = set(p_labels.tolist()) - set(g_labels.tolist())
    if missing:
        raise ValueError(f"probe identities missing from gallery: {sorted(missing)}")
    sims = _unit_rows(probes) @ _unit_rows(gallery).T
    if exclude_self:
        if sims.shape[0] != sims.shape[1]:
            raise ValueError("exclude_self requires probes == gallery")
        np.fill_diagonal(sims, -np.inf)
    best = np.argmax(sims, axis=1)  # first maximum = lowest gallery index
    return float(np.mean(g_labels[best] == p_labels))


def gallery_probe_split(records: Sequence[FaceRecord]) -> tuple[list[int], list[int]]:
    """First record of each identity (by record id) -> gallery; rest -> probes."""
    order = sorted(range(len(records)), key=lambda i: records[i].record_id)
    gallery, probes, seen = [], [], set()
    for i in order:
        ident = records[i].identity
        if ident in seen:
            probes.append(i)
        else:
            seen.add(ident)
            gallery.append(i)
    if not probes:
        raise ValueError("every identity has a single record; no probes left")
    return gallery, probes


# ---------------------------------------------------------------------------
# Linear probes from embeddings to ground-truth factors.


@dataclass(frozen=True)
class ProbeResult:
    """Held-out and train R-squared per (embedding kind, factor)."""

    heldout_r2: dict[str, dict[str, float]]
    train_r2: dict[str, dict[str, float]]
    ridge_used: dict[str, dict[str, bool]]
    folds: int

    def mean_heldout(self, kind: str) -> float:
        return float(np.mean(list(self.heldout_r2[kind].values())))


def _fit_linear(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, bool]:
    """Least squares with a ridge fallback when the design is rank-deficient."""
    beta, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    if rank == x.shape[1]:
        return beta, False
    gram = x.T @ x + 1e-6 * np.eye(x.shape[1])
    return np.linalg.solve(gram, x.T @ y), True


def disentanglement_probe(
    embeddings: Mapping[str, np.ndarray],
    latents: np.ndarray,
    factor_names: Sequence[str],
    folds: int = 5,
    seed: int = 0,
    groups: Sequence[int] | None = None,
) -> ProbeResult:
    """Ordinary least squares from each embedding to each latent factor.

    Held-out R-squared pools out-of-fold predictions over all records; train
    R-squared is averaged over folds. A rank-deficient design falls back to
    a lightly regularized solve and is flagged.

    When `groups` is given (one id per record) the folds are group-disjoint.
    Factors that are constant within a group make leaky record-level folds a
    cluster lookup that any discriminative embedding can solve; holding out
    whole groups measures whether the factor is actually encoded.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[1] != len(factor_names):
        raise ValueError("latents must be (N, #factors)")
    n = latents.shape[0]
    if folds < 2 or n < 2 * folds:
        raise ValueError("need at least two records per fold")
    fold_of = np.empty(n, dtype=np.int64)
    if groups is None:
        order = keyed_rng(STREAM_FOLDS, seed, 1).permutation(n)
        fold_of[order] = np.arange(n) % folds
    else:
        groups = np.asarray(groups)
        if groups.shape != (n,):
            raise ValueError("groups must align with latents")
        unique = np.unique(groups)
        if unique.size < folds:
            raise ValueError(f"need at least {folds} groups for {folds} group-disjoint folds")
        perm = keyed_rng(STREAM_FOLDS, seed, 1).permutation(unique.size)
        group_fold = {unique[g]: idx % folds for idx, g in enumerate(perm)}
        fold_of[:] = [group_fold[g] for g in groups]

    heldout: dict[str, dict[str, float]] = {}
    train_tab: dict[str, dict[str, float]] = {}
    ridge_tab: dict[str, dict[str, bool]] = {}
    for kind, emb in embeddings.items():
        emb = np.asarray(emb, dtype=np.float64)
        if emb.shape[0] != n:
            raise ValueError(f"{kind} embeddings do not align with latents")
        x_full = np.concatenate([emb, np.ones((n, 1))], axis=1)
        heldout[kind], train_tab[kind], ridge_tab[kind] = {}, {}, {}
        for f, name in enumerate(factor_names):
            y = latents[:, f]
            oof = np.empty(n)
            train_scores = []
            used_ridge = False
            for k in range(folds):
                te = fold_of == k
                tr = ~te
                beta, flagged = _fit_linear(x_full[tr], y[tr])
                used_ridge = used_ridge or flagged
                oof[te] = x_full[te] @ beta
                fit = x_full[tr] @ beta
                ss_tot = np.sum((y[tr] - y[tr].mean()) ** 2)
                train_scores.append(
                    1.0 - np.sum((y[tr] - fit) ** 2) / ss_tot if ss_tot > 0 else 0.0
                )
            ss_tot = np.sum((y - y.mean()) ** 2)
            heldout[kind][name] = float(
                1.0 - np.sum((y - oof) ** 2) / ss_tot if ss_tot > 0 else 0.0
            )
            train_tab[kind][name] = float(np.mean(train_scores))
            ridge_tab[kind][name] = used_ridge
    return ProbeResult(
        heldout_r2=heldout, train_r2=train_tab, ridge_used=ridge_tab, folds=folds
    )


# ---------------------------------------------------------------------------
# Nearest-neighbor retrieval.


def nearest_neighbor_gallery(
    embeddings: np.ndarray, probe_indices: Sequence[int], k: int = 6
) -> list[list[int]]:
    """Per probe, indices of the k cosine-nearest records (self included).

    Ties break toward the lower index. k beyond the gallery size is
    truncated with a warning.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    n = emb.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        log.warning("k=%d exceeds gallery size %d; truncating", k, n)
        k = n
    unit = _unit_rows(emb)
    out = []
    for p in probe_indices:
        sims = unit @ unit[int(p)]
        order = np.lexsort((np.arange(n), -sims))
        out.append([int(i) for i in order[:k]])
    return out


def retrieval_sheet(records: Sequence[FaceRecord], rows: Sequence[Sequence[int]]) -> ImageBuffer:
    """Contact sheet: one row per probe, columns ordered by similarity."""
    return tile_grid([[records[i].image for i in row] for row in rows])


# ---------------------------------------------------------------------------
# Attribute probes (frozen embeddings -> binary attributes).


@dataclass(frozen=True)
class AttributeProbeResult:
    names: tuple[str, ...]
    accuracy: np.ndarray  # (B,), nan where skipped
    skipped: np.ndarray  # (B,) bool

    @property
    def mean_accuracy(self) -> float:
        kept = self.accuracy[~self.skipped]
        if kept.size == 0:
            raise ValueError("all attributes were skipped")
        return float(np.mean(kept))


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def attribute_probe(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    names: Sequence[str] | None = None,
    lr: float = 0.01,
    lr_decay: float = 0.9,
    decay_interval_epochs: int = 4,
    epochs: int = 40,
    batch_size: int = 32,
    seed: int = 0,
) -> AttributeProbeResult:
    """Per-attribute 2-class linear softmax probes on frozen features.

    Each probe is trained with mini-batch SGD from zero weights under a
    stepped learning-rate schedule and scored by test accuracy. An attribute
    with a single class in either split is skipped and flagged.
    """
    x_tr = np.asarray(train_features, dtype=np.float64)
    x_te = np.asarray(test_features, dtype=np.float64)
    y_tr = np.asarray(train_labels, dtype=np.int64)
    y_te = np.asarray(test_labels, dtype=np.int64)
    if y_tr.ndim != 2 or y_te.ndim != 2 or y_tr.shape[1] != y_te.shape[1]:
        raise ValueError("labels must be (N, B) with matching attribute counts")
    n_attr = y_tr.shape[1]
    names = tuple(names) if names is not None else tuple(f"attr_{b}" for b in range(n_attr))
    if len(names) != n_attr:
        raise ValueError("names must match the attribute count")

    accs = np.full(n_attr, np.nan)
    skipped = np.zeros(n_attr, dtype=bool)
    n = x_tr.shape[0]
    for b in range(n_attr):
        if len(np.unique(y_tr[:, b])) < 2 or len(np.unique(y_te[:, b])) < 2:
            skipped[b] = True
            log.warning("attribute %s has a single class in a split; skipped", names[b])
            continue
        w = np.zeros((x_tr.shape[1], 2))
        bias = np.zeros(2)
        for epoch in range(epochs):
            step = lr * lr_decay ** (epoch // decay_interval_epochs)
            order = keyed_rng(STREAM_PERMUTE, seed, b, epoch).permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                xb = x_tr[idx]
                probs = _softmax_rows(xb @ w + bias)
                probs[np.arange(idx.size), y_tr[idx, b]] -= 1.0
                probs /= idx.size
                w -= step * (xb.T @ probs)
                bias -= step * probs.sum(axis=0)
        pred = np.argmax(x_te @ w + bias, axis=1)
        accs[b] = float(np.mean(pred == y_te[:, b]))
    return AttributeProbeResult(names=names, accuracy=accs, skipped=skipped)


def attribute_probe_baseline(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    n_permutations: int = 20,
    seed: int = 0,
    **probe_kwargs,
) -> np.ndarray:
    """Mean probe accuracy under label permutation, one value per draw.

    Train and test label rows are shuffled independently so any real
    feature-label association is destroyed while class balance and the
    training protocol stay identical.
    """
    y_tr = np.asarray(train_labels, dtype=np.int64)
    y_te = np.asarray(test_labels, dtype=np.int64)
    out = []
    for p in range(n_permutations):
        rng = keyed_rng(STREAM_PERMUTE, seed, 9999, p)
        perm_tr = rng.permutation(y_tr.shape[0])
        perm_te = rng.permutation(y_te.shape[0])
        result = attribute_probe(
            train_features,
            y_tr[perm_tr],
            test_features,
            y_te[perm_te],
            seed=seed,
            **probe_kwargs,
        )
        out.append(result.mean_accuracy)
    return np.array(out)


# ---------------------------------------------------------------------------
# Weight-grid sweep.


@dataclass(frozen=True)
class SweepCell:
    lambda_a: float
    lambda_g: float
    seed: int
    accuracy: float  # nan when the cell failed
    status: str  # "ok" | "failed"
    config_hash: str
    message: str = ""


@dataclass(frozen=True)
class SweepResult:
    lambda_a_values: tuple[float, ...]
    lambda_g_values: tuple[float, ...]
    seeds: tuple[int, ...]
    cells: tuple[SweepCell, ...]

    def mean_grid(self) -> np.ndarray:
        """Seed-averaged accuracy, shape (len(lambda_a), len(lambda_g))."""
        grid = np.full((len(self.lambda_a_values), len(self.lambda_g_values)), np.nan)
        for i, la in enumerate(self.lambda_a_values):
            for j, lg in enumerate(self.lambda_g_values):
                vals = [
                    c.accuracy
                    for c in self.cells
                    if c.lambda_a == la and c.lambda_g == lg and c.status == "ok"
                ]
                if vals:
                    grid[i, j] = float(np.mean(vals))
        return grid


def config_fingerprint(cfg: TrainConfig) -> str:
    """Short stable hash of a full training configuration."""
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("ascii")
    return hashlib.sha256(blob).hexdigest()[:12]


def lambda_sweep(
    manifest: DatasetManifest,
    base_cfg: TrainConfig,
    lambda_a_values: Sequence[float],
    lambda_g_values: Sequence[float],
    seeds: Sequence[int],
    verification_folds: int = 10,
) -> SweepResult:
    """Train one model per (appearance weight, geometry weight, seed) cell.

    Each cell is scored by held-out verification accuracy of the combined
    embedding. A failing cell is recorded with its error and the sweep
    continues. Triplets and test pairs are rebuilt once per seed and shared
    across cells.
    """
    la_vals = tuple(float(v) for v in lambda_a_values)
    lg_vals = tuple(float(v) for v in lambda_g_values)
    if any(v < 0 for v in la_vals + lg_vals):
        raise ValueError("sweep weights must be non-negative")
    cells = []
    for seed in seeds:
        triplets = build_triplets(manifest, base_cfg.pool_size, seed)
        n_classes = len(triplets.label_map())
        test_records = manifest.load_records("test")
        aligned = [align_record(r, triplets.frame) for r in test_records]
        labels = [r.identity for r in aligned]
        pairs = make_verification_pairs(labels, seed)
        scores_mask = np.concatenate(
            [np.ones(len(pairs.genuine), dtype=bool), np.zeros(len(pairs.impostor), dtype=bool)]
        )
        for la in la_vals:
            for lg in lg_vals:
                cfg = replace(
                    base_cfg,
                    seed=seed,
                    loss=replace(base_cfg.loss, appearance_weight=la, geometry_weight=lg),
                    net=replace(base_cfg.net, n_classes=n_classes),
                )
                tag = config_fingerprint(cfg)
                try:
                    result = train(cfg, triplets)
                    emb = embed_records(result.params, aligned)["combined"]
                    scores = np.concatenate(
                        [pair_scores(emb, pairs.genuine), pair_scores(emb, pairs.impostor)]
                    )
                    acc = verification_accuracy(
                        scores, scores_mask, folds=verification_folds, seed=seed
                    )
                    cells.append(SweepCell(la, lg, seed, acc, "ok", tag))
                except Exception as exc:  # noqa: BLE001 - cell isolation by contract
                    log.warning(
                        "sweep cell (%.3g, %.3g, seed %d) failed: %s", la, lg, seed, exc
                    )
                    cells.append(SweepCell(la, lg, seed, float("nan"), "failed", tag, str(exc)))
    return SweepResult(
        lambda_a_values=la_vals,
        lambda_g_values=lg_vals,
        seeds=tuple(int(s) for s in seeds),
        cells=tuple(cells),
    )


def write_sweep_csv(result: SweepResult, path) -> None:
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lambda_a", "lambda_g", "seed", "accuracy", "status", "config", "message"])
        for c in result.cells:
            writer.writerow(
                [repr(c.lambda_a), repr(c.lambda_g), c.seed, repr(c.accuracy), c.status, c.config_hash, c.message]
            )


# ---------------------------------------------------------------------------
# Full-report assembly.


@dataclass(frozen=True)
class EvalReport:
    seed: int
    config_hash: str
    n_test_records: int
    n_genuine_pairs: int
    n_impostor_pairs: int
    rank1: dict[str, float] = field(default_factory=dict)
    tar_at_far: dict[str, dict[str, float]] = field(default_factory=dict)
    verification: dict[str, float] = field(default_factory=dict)
    roc: dict[str, RocCurve] = field(default_factory=dict)
    probes: ProbeResult | None = None
    attributes: AttributeProbeResult | None = None
    triplet_geometry_cos: float = float("nan")
    triplet_appearance_cos: float = float("nan")

    def validate(self) -> None:
        for kind, value in self.rank1.items():
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"rank1[{kind}] out of range: {value}")
        for kind, table in self.tar_at_far.items():
            for far, value in table.items():
                if not (0.0 <= value <= 1.0):
                    raise ValueError(f"tar_at_far[{kind}][{far}] out of range: {value}")
        for kind, value in self.verification.items():
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"verification[{kind}] out of range: {value}")
        for kind, curve in self.roc.items():
            if np.any(np.diff(curve.thresholds) > 0):
                raise ValueError(f"roc[{kind}] thresholds must be non-increasing")
            if np.any(np.diff(curve.far) < 0) or np.any(np.diff(curve.tar) < 0):
                raise ValueError(f"roc[{kind}] is not monotone")


def _far_key(target: float) -> str:
    return f"{target:.0e}"


def evaluate_model(
    params: NetParams,
    manifest: DatasetManifest,
    frame: CanonicalFrame,
    seed: int = 0,
    config_hash: str = "",
    pool_size: int = 1000,
    probe_folds: int = 5,
    verification_folds: int = 10,
    attribute_epochs: int = 40,
) -> EvalReport:
    """Compute the full metric suite for one checkpoint on one dataset.

    Test records are aligned to the training frame; verification uses all
    genuine pairs plus an equal seeded impostor sample; identification uses
    the first record of each identity as gallery. Probe targets come from
    the generator's stored factors, and triplet similarities are measured on
    test-split triplets built in the same frame.
    """
    test_records = manifest.load_records("test")
    train_records = manifest.load_records("train")
    aligned_test = [align_record(r, frame) for r in test_records]
    aligned_train = [align_record(r, frame) for r in train_records]
    test_labels = [r.identity for r in aligned_test]
    embs = embed_records(params, aligned_test)

    pairs = make_verification_pairs(test_labels, seed)
    mask = np.concatenate(
        [np.ones(len(pairs.genuine), dtype=bool), np.zeros(len(pairs.impostor), dtype=bool)]
    )
    gallery_idx, probe_idx = gallery_probe_split(aligned_test)
    labels_arr = np.asarray(test_labels)

    rank1: dict[str, float] = {}
    tar_tab: dict[str, dict[str, float]] = {}
    verif: dict[str, float] = {}
    roc_tab: dict[str, RocCurve] = {}
    for kind in REPRESENTATIONS:
        emb = embs[kind]
        gen = pair_scores(emb, pairs.genuine)
        imp = pair_scores(emb, pairs.impostor)
        curve = verification_roc(gen, imp)
        roc_tab[kind] = curve
        tar_tab[kind] = {_far_key(t): curve.tar_at_far(t) for t in FAR_TARGETS}
        verif[kind] = verification_accuracy(
            np.concatenate([gen, imp]), mask, folds=verification_folds, seed=seed
        )
        rank1[kind] = rank1_identification(
            emb[gallery_idx], labels_arr[gallery_idx], emb[probe_idx], labels_arr[probe_idx]
        )

    if any(r.spec is None for r in test_records):
        raise ValueError("test records must carry generator factors for probing")
    latents = np.stack([r.spec.geo_latent for r in test_records])
    probes = disentanglement_probe(
        {"appearance": embs["appearance"], "geometry": embs["geometry"]},
        latents,
        GEO_FACTORS,
        folds=probe_folds,
        seed=seed,
        groups=[r.identity for r in test_records],
    )

    test_triplets = build_triplets(manifest, pool_size, seed, split="test", frame=frame)
    geo_cos, app_cos = triplet_similarities(params, test_triplets)

    attr_train = np.stack([r.spec.attributes for r in train_records]).astype(np.int64)
    attr_test = np.stack([r.spec.attributes for r in test_records]).astype(np.int64)
    train_embs = embed_records(params, aligned_train)
    # Probe features live on the same unit sphere the similarity metrics use;
    # raw norms swamp the probe's fixed learning rate.
    feats_train = np.concatenate(
        [_unit_rows(train_embs["appearance"]), _unit_rows(train_embs["geometry"])], axis=1
    )
    feats_test = np.concatenate(
        [_unit_rows(embs["appearance"]), _unit_rows(embs["geometry"])], axis=1
    )
    attributes = attribute_probe(
        feats_train,
        attr_train,
        feats_test,
        attr_test,
        names=APP_FACTORS,
        epochs=attribute_epochs,
        seed=seed,
    )

    report = EvalReport(
        seed=seed,
        config_hash=config_hash,
        n_test_records=len(test_records),
        n_genuine_pairs=int(pairs.genuine.shape[0]),
        n_impostor_pairs=int(pairs.impostor.shape[0]),
        rank1=rank1,
        tar_at_far=tar_tab,
        verification=verif,
        roc=roc_tab,
        probes=probes,
        attributes=attributes,
        triplet_geometry_cos=geo_cos,
        triplet_appearance_cos=app_cos,
    )
    report.validate()
    return report


def triplet_similarities(params: NetParams, triplets: TripletSet) -> tuple[float, float]:
    """Mean cos(geometry of query, geometry of warp) and
    cos(appearance of neighbor, appearance of warp) over a triplet set."""
    if not triplets.items:
        raise ValueError("no triplets to score")
    queries = embed_records(params, [t.query for t in triplets.items])
    neighbors = embed_records(params, [t.neighbor for t in triplets.items])
    warps = embed_records(params, [t.warped for t in triplets.items])
    geo = np.sum(
        _unit_rows(queries["geometry"]) * _unit_rows(warps["geometry"]), axis=1
    )
    app = np.sum(
        _unit_rows(neighbors["appearance"]) * _unit_rows(warps["appearance"]), axis=1
    )
    return float(np.mean(geo)), float(np.mean(app))


def write_report_csv(report: EvalReport, path) -> None:
    """Flat metric table: metric, representation, detail, value."""
    rows: list[tuple[str, str, str, float]] = []
    for kind in REPRESENTATIONS:
        if kind in report.rank1:
            rows.append(("rank1", kind, "", report.rank1[kind]))
        for far, value in report.tar_at_far.get(kind, {}).items():
            rows.append(("tar_at_far", kind, far, value))
        if kind in report.verification:
            rows.append(("verification_accuracy", kind, "", report.verification[kind]))
    if report.probes is not None:
        for kind, table in report.probes.heldout_r2.items():
            for factor, value in table.items():
                rows.append(("probe_r2_heldout", kind, factor, value))
        for kind, table in report.probes.train_r2.items():
            for factor, value in table.items():
                rows.append(("probe_r2_train", kind, factor, value))
    if report.attributes is not None:
        for name, acc, skip in zip(
            report.attributes.names, report.attributes.accuracy, report.attributes.skipped
        ):
            if not skip:
                rows.append(("attribute_accuracy", "frozen", name, float(acc)))
        rows.append(("attribute_accuracy_mean", "frozen", "", report.attributes.mean_accuracy))
    rows.append(("triplet_geometry_cos", "geometry", "", report.triplet_geometry_cos))
    rows.append(("triplet_appearance_cos", "appearance", "", report.triplet_appearance_cos))
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "representation", "detail", "value"])
        for metric, kind, detail, value in rows:
            writer.writerow([metric, kind, detail, repr(float(value))])


def write_roc_csv(report: EvalReport, path) -> None:
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["representation", "threshold", "far", "tar"])
        for kind in REPRESENTATIONS:
            curve = report.roc.get(kind)
            if curve is None:
                continue
            for t, far, tar in zip(curve.thresholds, curve.far, curve.tar):
                writer.writerow([kind, repr(float(t)), repr(float(far)), repr(float(tar))])


# ---------------------------------------------------------------------------
# Plots (headless, byte-stable SVG).


def _save_svg(fig, path) -> None:
    import matplotlib

    with matplotlib.rc_context({"svg.hashsalt": "dagfaces", "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata={"Date": None})


def _pyplot():
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    return plt


def roc_svg(report: EvalReport, path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    for kind in REPRESENTATIONS:
        curve = report.roc.get(kind)
        if curve is not None:
            ax.plot(curve.far, curve.tar, drawstyle="steps-post", label=kind)
    ax.set_xlabel("false accept rate")
    ax.set_ylabel("true accept rate")
    ax.set_title("verification ROC")
    ax.legend(loc="lower right")
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def sweep_heatmap_svg(result: SweepResult, path) -> None:
    plt = _pyplot()
    grid = result.mean_grid()
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(grid, origin="lower", cmap="viridis")
    ax.set_xticks(range(len(result.lambda_g_values)))
    ax.set_xticklabels([f"{v:g}" for v in result.lambda_g_values])
    ax.set_yticks(range(len(result.lambda_a_values)))
    ax.set_yticklabels([f"{v:g}" for v in result.lambda_a_values])
    ax.set_xlabel("geometry weight")
    ax.set_ylabel("appearance weight")
    ax.set_title("held-out verification accuracy")
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            if np.isfinite(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.3f}", ha="center", va="center", color="white")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def training_curves_svg(log_rows: Sequence[Mapping[str, float]], path) -> None:
    plt = _pyplot()
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3.2))
    epochs = [row["epoch"] for row in log_rows]
    ax0.plot(epochs, [row["loss_total"] for row in log_rows], label="total")
    ax0.plot(epochs, [row["loss_id"] for row in log_rows], label="identification")
    ax0.set_xlabel("epoch")
    ax0.set_ylabel("loss")
    ax0.legend()
    ax1.plot(epochs, [row["train_acc"] for row in log_rows], color="tab:green")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train accuracy")
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def save_contact_sheet(sheet: ImageBuffer, path) -> None:
    save_image(sheet, path)
