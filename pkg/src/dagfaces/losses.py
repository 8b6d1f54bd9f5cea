"""Cosine-based losses with analytic gradients.

Three ingredients train the split embedding: an identification loss with a
configurable angular margin on the combined embedding, an appearance term
that ties a warped face to the face whose pixels it borrowed, and a
geometry term that ties it to the face whose landmark layout it borrowed
while pushing the layout donor and pixel donor apart in proportion to their
landmark disparity. Every function returns the value together with exact
gradients; no autodiff is involved anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

_COS_CLIP = 1e-12


class DegenerateVectorError(ValueError):
    """Cosine similarity is undefined for zero-norm vectors."""


@dataclass(frozen=True)
class LossConfig:
    """Hyper-parameters of the loss suite.

    m1 multiplies the true-class angle (evaluated through a Chebyshev
    expansion of cos(m1 * theta)), m2 is subtracted from the true-class
    cosine, and scale multiplies all logits. scale is either a positive
    float or the string "embedding-norm", in which case each sample is
    scaled by the norm of its own embedding and that norm is differentiated
    through. The default is a fixed scale: the embedding-norm variant has a
    runaway feedback at the default learning rate (larger norms lower the
    loss once the true class leads, so norms grow without bound) and is only
    safe at much lower rates. geo_margin scales landmark disparity into the
    hinge margin of the geometry loss; appearance_weight and geometry_weight
    mix the three terms in the total loss.
    """

    m1: int = 1
    m2: float = 0.0
    scale: float | str = 16.0
    geo_margin: float = 9.4
    appearance_weight: float = 1.3
    geometry_weight: float = 0.75
    monotonic_angle: bool = False

    def __post_init__(self) -> None:
        if int(self.m1) != self.m1 or self.m1 < 0:
            raise ValueError(f"m1 must be a non-negative integer, got {self.m1}")
        if not (0.0 <= self.m2 < 1.0):
            raise ValueError(f"m2 must lie in [0, 1), got {self.m2}")
        if isinstance(self.scale, str):
            if self.scale != "embedding-norm":
                raise ValueError(f"scale must be positive or 'embedding-norm', got {self.scale!r}")
        elif not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"fixed scale must be positive, got {self.scale}")
        if self.geo_margin < 0:
            raise ValueError("geo_margin must be >= 0")
        if self.appearance_weight < 0 or self.geometry_weight < 0:
            raise ValueError("loss weights must be >= 0")

    def to_dict(self) -> dict:
        return {
            "m1": int(self.m1),
            "m2": float(self.m2),
            "scale": self.scale if isinstance(self.scale, str) else float(self.scale),
            "geo_margin": float(self.geo_margin),
            "appearance_weight": float(self.appearance_weight),
            "geometry_weight": float(self.geometry_weight),
            "monotonic_angle": bool(self.monotonic_angle),
        }

    @classmethod
    def softmax(cls, **overrides) -> "LossConfig":
        """Plain softmax: no margin, per-sample embedding-norm scale."""
        return replace(cls(m1=1, m2=0.0, scale="embedding-norm"), **overrides)

    @classmethod
    def sphereface(cls, **overrides) -> "LossConfig":
        """Multiplicative angular margin m1=4, embedding-norm scale."""
        return replace(cls(m1=4, m2=0.0, scale="embedding-norm"), **overrides)

    @classmethod
    def cosface(cls, **overrides) -> "LossConfig":
        """Additive cosine margin m2=0.35 at fixed scale 64."""
        return replace(cls(m1=1, m2=0.35, scale=64.0), **overrides)


@dataclass(frozen=True)
class EmbeddingTriple:
    """Batch of appearance, geometry, and combined embeddings (rows align)."""

    appearance: np.ndarray  # (N, d)
    geometry: np.ndarray  # (N, d)
    combined: np.ndarray  # (N, d')

    def __post_init__(self) -> None:
        for name in ("appearance", "geometry", "combined"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2:
                raise ValueError(f"{name} embeddings must be a 2-D batch")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} embeddings must be finite")
            object.__setattr__(self, name, arr)
        n = self.appearance.shape[0]
        if self.geometry.shape[0] != n or self.combined.shape[0] != n:
            raise ValueError("embedding batches must share the batch dimension")

    @property
    def batch_size(self) -> int:
        return int(self.appearance.shape[0])


def check_classifier_weights(weights: np.ndarray) -> np.ndarray:
    """Validate a (C, d') class-weight matrix: finite, no zero rows."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("classifier weights must be a (classes, dim) matrix")
    if not np.isfinite(w).all():
        raise ValueError("classifier weights must be finite")
    norms = np.linalg.norm(w, axis=1)
    if norms.min() <= 0.0:
        raise DegenerateVectorError("classifier weights contain a zero vector")
    return w


def _row_norms(arr: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(arr, axis=1)
    if norms.min() <= 0.0:
        raise DegenerateVectorError(f"zero-norm {what} vector")
    return norms


def cosine_similarity(v1: np.ndarray, v2: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Cosine of two vectors plus gradients w.r.t. both inputs."""
    a = np.asarray(v1, dtype=np.float64).reshape(1, -1)
    b = np.asarray(v2, dtype=np.float64).reshape(1, -1)
    cos, da, db = _batch_cosine(a, b)
    return float(cos[0]), da[0], db[0]


def _batch_cosine(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise cosine of two (N, d) batches with per-row gradients."""
    if a.shape != b.shape:
        raise ValueError(f"batch shapes differ: {a.shape} vs {b.shape}")
    na = _row_norms(a, "embedding")[:, None]
    nb = _row_norms(b, "embedding")[:, None]
    cos = (a * b).sum(axis=1, keepdims=True) / (na * nb)
    da = (b / nb - cos * a / na) / na
    db = (a / na - cos * b / nb) / nb
    return cos[:, 0], da, db


@dataclass(frozen=True)
class GeometryLossResult:
    value: float
    d_anchor: np.ndarray  # gradient w.r.t. the unwarped query embeddings
    d_warped: np.ndarray
    d_neighbor: np.ndarray
    aligned_cos: np.ndarray  # per-sample cosine(query, warped)
    contrast_cos: np.ndarray  # per-sample cosine(query, neighbor)
    hinge_active: np.ndarray


def geometry_loss(
    g_query: np.ndarray,
    g_warped: np.ndarray,
    g_neighbor: np.ndarray,
    disparity: np.ndarray,
    geo_margin: float,
) -> GeometryLossResult:
    """Contrastive geometry term.

    mean over the batch of
        -cos(g_query, g_warped) + max(0, cos(g_query, g_neighbor) - geo_margin * disparity)

    The warp gives the neighbor's pixels the query's landmark layout, so the
    first term demands that layout alone determines the geometry embedding;
    the hinge separates the query from the unwarped neighbor by a margin
    that grows with their landmark disparity. The hinge subgradient at the
    kink is taken as 1 (active branch), making gradients deterministic.
    """
    disparity = np.asarray(disparity, dtype=np.float64).reshape(-1)
    if disparity.min() < 0:
        raise ValueError("disparity values must be >= 0")
    if geo_margin < 0:
        raise ValueError("geo_margin must be >= 0")
    n = g_query.shape[0]
    if disparity.shape[0] != n:
        raise ValueError("disparity batch size mismatch")

    cos_w, d_q_w, d_w = _batch_cosine(g_query, g_warped)
    cos_n, d_q_n, d_n = _batch_cosine(g_query, g_neighbor)
    margin = cos_n - geo_margin * disparity
    active = margin >= 0.0
    value = float((-cos_w + np.where(active, margin, 0.0)).mean())
    act = active[:, None].astype(np.float64)
    return GeometryLossResult(
        value=value,
        d_anchor=(-d_q_w + act * d_q_n) / n,
        d_warped=-d_w / n,
        d_neighbor=act * d_n / n,
        aligned_cos=cos_w,
        contrast_cos=cos_n,
        hinge_active=active,
    )


@dataclass(frozen=True)
class AppearanceLossResult:
    value: float
    d_neighbor: np.ndarray  # gradient w.r.t. the pixel donor's embeddings
    d_warped: np.ndarray
    aligned_cos: np.ndarray


def appearance_loss(a_neighbor: np.ndarray, a_warped: np.ndarray) -> AppearanceLossResult:
    """Pulls a warped face toward its pixel donor: mean of -cos(a, a_warped).

    The warp changed only the landmark layout, so the appearance embedding
    of the result should match the face that supplied the pixels.
    """
    cos, d_n, d_w = _batch_cosine(a_neighbor, a_warped)
    n = a_neighbor.shape[0]
    return AppearanceLossResult(
        value=float(-cos.mean()),
        d_neighbor=-d_n / n,
        d_warped=-d_w / n,
        aligned_cos=cos,
    )


def _chebyshev_pair(m: int, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """cos(m * theta) as a polynomial in c = cos(theta), plus its c-derivative."""
    if m == 0:
        return np.ones_like(c), np.zeros_like(c)
    t_prev, t_cur = np.ones_like(c), c  # T_0, T_1
    u_prev, u_cur = np.ones_like(c), 2.0 * c  # U_0, U_1
    for _ in range(m - 1):
        t_prev, t_cur = t_cur, 2.0 * c * t_cur - t_prev
    if m == 1:
        return t_cur, np.ones_like(c)
    for _ in range(m - 2):
        u_prev, u_cur = u_cur, 2.0 * c * u_cur - u_prev
    return t_cur, m * u_cur


def _monotonic_pair(m: int, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Piecewise-monotonic variant: (-1)^k cos(m theta) - 2k on theta-sectors."""
    theta = np.arccos(c)
    k = np.floor(m * theta / np.pi)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    val = sign * np.cos(m * theta) - 2.0 * k
    # d/dc = sign * m * sin(m theta) / sin(theta); c is clamped upstream.
    dval = sign * m * np.sin(m * theta) / np.sqrt(1.0 - c * c)
    return val, dval


@dataclass(frozen=True)
class IdentificationLossResult:
    value: float
    d_embeddings: np.ndarray
    d_weights: np.ndarray
    probabilities: np.ndarray


def identification_loss(
    embeddings: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    cfg: LossConfig,
) -> IdentificationLossResult:
    """Angular-margin cross-entropy on cosine logits.

    Logits are scale * cos(theta_j) for every class j, except the true
    class, which gets scale * (cos(m1 * theta_y) - m2). With the
    "embedding-norm" scale each sample uses the norm of its own embedding,
    and that dependence is part of the gradient.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    w = check_classifier_weights(weights)
    n, _ = z.shape
    c_classes = w.shape[0]
    if y.shape[0] != n:
        raise ValueError("labels batch size mismatch")
    if y.min() < 0 or y.max() >= c_classes:
        raise ValueError("labels must be valid class indices")

    zn = _row_norms(z, "embedding")
    wn = _row_norms(w, "classifier weight")
    cos = (z @ w.T) / (zn[:, None] * wn[None, :])
    clipped = np.clip(cos, -1.0 + _COS_CLIP, 1.0 - _COS_CLIP)
    clip_open = (cos > -1.0 + _COS_CLIP) & (cos < 1.0 - _COS_CLIP)

    rows = np.arange(n)
    margin_fn = _monotonic_pair if cfg.monotonic_angle else _chebyshev_pair
    t_val, t_der = margin_fn(int(cfg.m1), clipped[rows, y])

    q = clipped.copy()
    q[rows, y] = t_val - cfg.m2
    norm_mode = isinstance(cfg.scale, str)
    s = zn if norm_mode else np.full(n, float(cfg.scale))
    logits = s[:, None] * q

    peak = logits.max(axis=1, keepdims=True)
    lse = peak[:, 0] + np.log(np.exp(logits - peak).sum(axis=1))
    value = float((lse - logits[rows, y]).mean())
    probs = np.exp(logits - lse[:, None])

    grad_logits = probs.copy()
    grad_logits[rows, y] -= 1.0
    grad_logits /= n

    dq_dc = np.ones_like(q)
    dq_dc[rows, y] = t_der
    a = grad_logits * s[:, None] * dq_dc * clip_open

    wn_unit = w / wn[:, None]
    zn_unit = z / zn[:, None]
    d_z = (a @ wn_unit) / zn[:, None] - (a * cos).sum(axis=1, keepdims=True) * z / (zn**2)[:, None]
    if norm_mode:
        d_z = d_z + (grad_logits * q).sum(axis=1, keepdims=True) * zn_unit
    d_w = (a.T @ zn_unit) / wn[:, None] - (a * cos).sum(axis=0)[:, None] * w / (wn**2)[:, None]
    return IdentificationLossResult(
        value=value, d_embeddings=d_z, d_weights=d_w, probabilities=probs
    )


@dataclass(frozen=True)
class TripleGradients:
    """Gradients w.r.t. one face's embedding triple."""

    d_appearance: np.ndarray
    d_geometry: np.ndarray
    d_combined: np.ndarray


@dataclass(frozen=True)
class TotalLossResult:
    value: float
    id_value: float  # averaged over the query and neighbor batches
    appearance_value: float
    geometry_value: float
    d_query: TripleGradients
    d_neighbor: TripleGradients
    d_warped: TripleGradients
    d_weights: np.ndarray
    mean_geo_cos: float
    mean_app_cos: float
    train_hits: int  # argmax-cosine correct predictions over both id batches


def total_loss(
    query: EmbeddingTriple,
    neighbor: EmbeddingTriple,
    warped: EmbeddingTriple,
    labels_query: np.ndarray,
    labels_neighbor: np.ndarray,
    disparity: np.ndarray,
    weights: np.ndarray,
    cfg: LossConfig,
) -> TotalLossResult:
    """Combined objective: averaged identification + weighted side terms.

    The identification term averages the losses of the query and neighbor
    batches; the warped faces enter only through the appearance and
    geometry terms, never through identification.
    """
    id_q = identification_loss(query.combined, labels_query, weights, cfg)
    id_n = identification_loss(neighbor.combined, labels_neighbor, weights, cfg)
    app = appearance_loss(neighbor.appearance, warped.appearance)
    geo = geometry_loss(
        query.geometry, warped.geometry, neighbor.geometry, disparity, cfg.geo_margin
    )

    la, lg = cfg.appearance_weight, cfg.geometry_weight
    id_value = 0.5 * (id_q.value + id_n.value)
    value = id_value + la * app.value + lg * geo.value

    zeros_a = np.zeros_like(query.appearance)
    zeros_z = np.zeros_like(query.combined)
    d_query = TripleGradients(
        d_appearance=zeros_a,
        d_geometry=lg * geo.d_anchor,
        d_combined=0.5 * id_q.d_embeddings,
    )
    d_neighbor = TripleGradients(
        d_appearance=la * app.d_neighbor,
        d_geometry=lg * geo.d_neighbor,
        d_combined=0.5 * id_n.d_embeddings,
    )
    d_warped = TripleGradients(
        d_appearance=la * app.d_warped,
        d_geometry=lg * geo.d_warped,
        d_combined=zeros_z,
    )

    # Accuracy is reported on plain cosine logits, without the margin bias.
    y_q = np.asarray(labels_query, dtype=np.int64).reshape(-1)
    y_n = np.asarray(labels_neighbor, dtype=np.int64).reshape(-1)
    w_unit = weights / np.linalg.norm(weights, axis=1)[:, None]
    hits = int(((query.combined @ w_unit.T).argmax(axis=1) == y_q).sum())
    hits += int(((neighbor.combined @ w_unit.T).argmax(axis=1) == y_n).sum())

    return TotalLossResult(
        value=value,
        id_value=id_value,
        appearance_value=app.value,
        geometry_value=geo.value,
        d_query=d_query,
        d_neighbor=d_neighbor,
        d_warped=d_warped,
        d_weights=0.5 * (id_q.d_weights + id_n.d_weights),
        mean_geo_cos=float(geo.aligned_cos.mean()),
        mean_app_cos=float(app.aligned_cos.mean()),
        train_hits=hits,
    )
