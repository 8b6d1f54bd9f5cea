"""Small convolutional network with a channel-split embedding head.

A trunk of strided 3x3 convs and residual blocks (each conv followed by a
PReLU with one slope per layer) produces feature maps that are split in
depth: the first half of the channels feeds a linear appearance head, the
second half a linear geometry head, and a final linear map combines both
into the embedding used for identification. Forward and backward passes
are written directly on numpy arrays; backward returns exact gradients for
every parameter, including the PReLU slopes, plus the input gradient.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .images import ImageBuffer
from .losses import EmbeddingTriple, LossConfig, total_loss
from .seeding import STREAM_GRADCHECK, STREAM_INIT, keyed_rng

_MAGIC = b"DAGNET01"
_FORMAT_VERSION = 1


class ConfigurationError(ValueError):
    """Network configuration or input shape is inconsistent."""


class CacheMismatchError(RuntimeError):
    """Activation cache does not belong to the current parameters."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the config."""


@dataclass(frozen=True)
class LayerSpec:
    """One trunk element: a strided conv or a two-conv residual block."""

    kind: str  # "conv" or "res"
    filters: int
    stride: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("conv", "res"):
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.filters < 1:
            raise ConfigurationError("filter count must be >= 1")
        if self.kind == "conv" and self.stride < 1:
            raise ConfigurationError("stride must be >= 1")
        if self.kind == "res" and self.stride != 1:
            raise ConfigurationError("residual blocks do not support strides")

    @classmethod
    def parse(cls, text: str) -> "LayerSpec":
        parts = text.split(":")
        if parts[0] == "conv" and len(parts) == 3:
            return cls("conv", int(parts[1]), int(parts[2]))
        if parts[0] == "res" and len(parts) == 2:
            return cls("res", int(parts[1]))
        raise ConfigurationError(f"cannot parse layer spec {text!r}")

    def text(self) -> str:
        return f"conv:{self.filters}:{self.stride}" if self.kind == "conv" else f"res:{self.filters}"


_DEFAULT_TRUNK = ("conv:8:2", "res:8", "conv:16:2", "res:16")


@dataclass(frozen=True)
class NetConfig:
    """Architecture description; all sizes checked at construction."""

    input_size: tuple[int, int, int] = (32, 32, 1)  # (W, W, channels)
    trunk: tuple = _DEFAULT_TRUNK
    d: int = 16  # per-branch embedding size
    d_prime: int = 32  # combined embedding size
    n_classes: int = 2

    def __post_init__(self) -> None:
        w, h, c = self.input_size
        if w != h or w < 2:
            raise ConfigurationError(f"input must be square and >= 2, got {self.input_size}")
        if c not in (1, 3):
            raise ConfigurationError("input channels must be 1 or 3")
        layers = tuple(
            LayerSpec.parse(t) if isinstance(t, str) else t for t in self.trunk
        )
        if not layers:
            raise ConfigurationError("trunk must contain at least one layer")
        object.__setattr__(self, "trunk", layers)
        if self.d < 1 or self.d_prime < 1 or self.n_classes < 1:
            raise ConfigurationError("d, d_prime, and n_classes must be >= 1")
        # Walk the trunk to validate channel/spatial bookkeeping.
        channels, side = c, w
        for layer in layers:
            if layer.kind == "conv":
                channels = layer.filters
                side = (side - 1) // layer.stride + 1
            else:
                if layer.filters != channels:
                    raise ConfigurationError(
                        f"residual block expects {channels} channels, spec says {layer.filters}"
                    )
            if side < 1:
                raise ConfigurationError("trunk strides exhaust the spatial extent")
        if channels % 2 != 0:
            raise ConfigurationError("final channel count must be even for the split")

    @property
    def feature_shape(self) -> tuple[int, int]:
        """(channels, side) of the trunk output."""
        side, channels = self.input_size[0], self.input_size[2]
        for layer in self.trunk:
            if layer.kind == "conv":
                channels = layer.filters
                side = (side - 1) // layer.stride + 1
        return channels, side

    @property
    def chunk_features(self) -> int:
        channels, side = self.feature_shape
        return (channels // 2) * side * side

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "trunk": [l.text() for l in self.trunk],
            "d": self.d,
            "d_prime": self.d_prime,
            "n_classes": self.n_classes,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("ascii")
        return hashlib.sha256(blob).hexdigest()


def _tensor_shapes(cfg: NetConfig) -> dict[str, tuple]:
    """Parameter names and shapes in declaration (checkpoint) order."""
    shapes: dict[str, tuple] = {}
    channels = cfg.input_size[2]
    for i, layer in enumerate(cfg.trunk):
        if layer.kind == "conv":
            shapes[f"trunk{i}.w"] = (layer.filters, channels, 3, 3)
            shapes[f"trunk{i}.b"] = (layer.filters,)
            shapes[f"trunk{i}.p"] = (1,)
            channels = layer.filters
        else:
            shapes[f"trunk{i}.w1"] = (channels, channels, 3, 3)
            shapes[f"trunk{i}.b1"] = (channels,)
            shapes[f"trunk{i}.p1"] = (1,)
            shapes[f"trunk{i}.w2"] = (channels, channels, 3, 3)
            shapes[f"trunk{i}.b2"] = (channels,)
            shapes[f"trunk{i}.p2"] = (1,)
    flat = cfg.chunk_features
    shapes["head_a.w"] = (cfg.d, flat)
    shapes["head_a.b"] = (cfg.d,)
    shapes["head_g.w"] = (cfg.d, flat)
    shapes["head_g.b"] = (cfg.d,)
    shapes["combine.w"] = (cfg.d_prime, 2 * cfg.d)
    shapes["combine.b"] = (cfg.d_prime,)
    shapes["classifier.w"] = (cfg.n_classes, cfg.d_prime)
    return shapes


class NetParams:
    """Named parameter tensors plus a version counter for cache validation."""

    def __init__(self, cfg: NetConfig, tensors: dict[str, np.ndarray]):
        expected = _tensor_shapes(cfg)
        if list(tensors) != list(expected):
            raise ConfigurationError("parameter names do not match the config")
        for name, shape in expected.items():
            t = tensors[name]
            if t.shape != shape:
                raise ConfigurationError(f"{name} has shape {t.shape}, expected {shape}")
            if not np.isfinite(t).all():
                raise ValueError(f"{name} contains non-finite values")
        self.cfg = cfg
        self.tensors = {k: np.array(v, dtype=np.float64) for k, v in tensors.items()}
        self.version = 0

    @property
    def classifier(self) -> np.ndarray:
        return self.tensors["classifier.w"]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def clone(self) -> "NetParams":
        return NetParams(self.cfg, {k: v.copy() for k, v in self.tensors.items()})

    def apply_update(self, grads: dict[str, np.ndarray], lr: float) -> None:
        """In-place SGD step; invalidates caches from earlier forwards."""
        for name, t in self.tensors.items():
            t -= lr * grads[name]
        self.version += 1

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def save(self, path) -> None:
        hash_bytes = self.cfg.config_hash().encode("ascii")
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", _FORMAT_VERSION))
            fh.write(hash_bytes)
            for t in self.tensors.values():
                fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path, cfg: NetConfig) -> "NetParams":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[: len(_MAGIC)] != _MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        pos = len(_MAGIC)
        (version,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if version != _FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        stored = blob[pos : pos + 64].decode("ascii", errors="replace")
        pos += 64
        if stored != cfg.config_hash():
            raise CheckpointError(f"{path}: config hash mismatch")
        shapes = _tensor_shapes(cfg)
        expected = pos + 8 * sum(int(np.prod(s)) for s in shapes.values())
        if len(blob) != expected:
            raise CheckpointError(
                f"{path}: file has {len(blob)} bytes, config needs {expected}"
            )
        tensors = {}
        for name, shape in shapes.items():
            count = int(np.prod(shape))
            data = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
            pos += count * 8
            tensors[name] = data.reshape(shape).astype(np.float64)
        return cls(cfg, tensors)


def init_params(cfg: NetConfig, seed: int) -> NetParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases, slopes 0.25."""
    rng = keyed_rng(STREAM_INIT, seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _tensor_shapes(cfg).items():
        if name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
            tensors[name] = np.zeros(shape)
        elif name.endswith(".p") or name.endswith(".p1") or name.endswith(".p2"):
            tensors[name] = np.full(shape, 0.25)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return NetParams(cfg, tensors)


def _conv_forward(x, w, b, stride):
    n, c, h, wd = x.shape
    f = w.shape[0]
    oh = (h - 1) // stride + 1
    ow = (wd - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, oh, ow))
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
    mat = cols.reshape(n, c * 9, oh * ow)
    out = np.tensordot(mat, w.reshape(f, c * 9), axes=([1], [1]))  # (n, oh*ow, f)
    out = out.transpose(0, 2, 1).reshape(n, f, oh, ow) + b[None, :, None, None]
    return out, (x.shape, mat, stride)


def _conv_backward(dout, w, cache):
    x_shape, mat, stride = cache
    n, f, oh, ow = dout.shape
    c = x_shape[1]
    dmat_out = dout.reshape(n, f, oh * ow)
    dw = np.tensordot(dmat_out, mat, axes=([0, 2], [0, 2])).reshape(f, c, 3, 3)
    db = dout.sum(axis=(0, 2, 3))
    dcols = np.tensordot(dmat_out, w.reshape(f, c * 9), axes=([1], [0]))  # (n, oh*ow, c*9)
    dcols = dcols.transpose(0, 2, 1).reshape(n, c, 3, 3, oh, ow)
    dxp = np.zeros((n, c, x_shape[2] + 2, x_shape[3] + 2))
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += dcols[
                :, :, ki, kj
            ]
    return dw, db, dxp[:, :, 1:-1, 1:-1]


def _prelu_forward(x, slope):
    s = float(slope[0])
    return np.where(x > 0, x, s * x), x


def _prelu_backward(dout, x, slope):
    s = float(slope[0])
    dx = dout * np.where(x > 0, 1.0, s)
    dslope = np.array([(dout * np.where(x > 0, 0.0, x)).sum()])
    return dx, dslope


def _as_batch(images, cfg: NetConfig) -> np.ndarray:
    if isinstance(images, ImageBuffer):
        arr = images.data.transpose(2, 0, 1)[None]
    else:
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
    w, h, c = cfg.input_size
    if arr.ndim != 4 or arr.shape[1:] != (c, h, w):
        raise ConfigurationError(
            f"input batch shape {arr.shape} does not match config {(c, h, w)}"
        )
    return arr


def forward(params: NetParams, images) -> tuple[EmbeddingTriple, np.ndarray, dict]:
    """Run the network on a batch (or one ImageBuffer).

    Returns the embedding triple, plain cosine logits against the classifier
    rows (margin-free; the loss module builds its own logits), and the
    activation cache consumed by backward. Zero-norm embeddings or classifier
    rows yield zero cosines here; loss functions enforce non-degeneracy
    themselves.
    """
    cfg = params.cfg
    x = _as_batch(images, cfg)
    t = params.tensors
    layer_caches = []
    for i, layer in enumerate(cfg.trunk):
        if layer.kind == "conv":
            pre, ccache = _conv_forward(x, t[f"trunk{i}.w"], t[f"trunk{i}.b"], layer.stride)
            x, pcache = _prelu_forward(pre, t[f"trunk{i}.p"])
            layer_caches.append(("conv", ccache, pcache))
        else:
            pre1, c1 = _conv_forward(x, t[f"trunk{i}.w1"], t[f"trunk{i}.b1"], 1)
            act1, p1 = _prelu_forward(pre1, t[f"trunk{i}.p1"])
            pre2, c2 = _conv_forward(act1, t[f"trunk{i}.w2"], t[f"trunk{i}.b2"], 1)
            act2, p2 = _prelu_forward(pre2, t[f"trunk{i}.p2"])
            x = act2 + x
            layer_caches.append(("res", c1, p1, c2, p2))

    n = x.shape[0]
    half = x.shape[1] // 2
    flat_a = x[:, :half].reshape(n, -1)
    flat_g = x[:, half:].reshape(n, -1)
    a = flat_a @ t["head_a.w"].T + t["head_a.b"]
    g = flat_g @ t["head_g.w"].T + t["head_g.b"]
    cat = np.concatenate([a, g], axis=1)
    z = cat @ t["combine.w"].T + t["combine.b"]

    w_cls = t["classifier.w"]
    zn = np.linalg.norm(z, axis=1, keepdims=True)
    wn = np.linalg.norm(w_cls, axis=1, keepdims=True)
    safe_z = np.where(zn > 0, zn, 1.0)
    safe_w = np.where(wn > 0, wn, 1.0)
    cosines = (z / safe_z) @ (w_cls / safe_w).T

    cache = {
        "version": params.version,
        "params_id": id(params),
        "layers": layer_caches,
        "feat_shape": x.shape,
        "flat_a": flat_a,
        "flat_g": flat_g,
        "cat": cat,
        "n": n,
    }
    return EmbeddingTriple(appearance=a, geometry=g, combined=z), cosines, cache


def backward(
    params: NetParams, cache: dict, d_outputs
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Exact gradients from output-embedding gradients.

    d_outputs is (d_appearance, d_geometry, d_combined) batches (or a
    TripleGradients). Returns ({name: grad}, input gradient). The classifier
    entry is zero here: margin logits live in the loss module, which supplies
    that gradient itself.
    """
    if cache.get("params_id") != id(params) or cache.get("version") != params.version:
        raise CacheMismatchError("activation cache is stale or from different parameters")
    if hasattr(d_outputs, "d_appearance"):
        d_outputs = (d_outputs.d_appearance, d_outputs.d_geometry, d_outputs.d_combined)
    da, dg, dz = (np.asarray(d, dtype=np.float64) for d in d_outputs)

    cfg = params.cfg
    t = params.tensors
    grads = {k: np.zeros_like(v) for k, v in t.items()}

    cat = cache["cat"]
    grads["combine.w"] = dz.T @ cat
    grads["combine.b"] = dz.sum(axis=0)
    dcat = dz @ t["combine.w"]
    da_total = da + dcat[:, : cfg.d]
    dg_total = dg + dcat[:, cfg.d :]

    grads["head_a.w"] = da_total.T @ cache["flat_a"]
    grads["head_a.b"] = da_total.sum(axis=0)
    grads["head_g.w"] = dg_total.T @ cache["flat_g"]
    grads["head_g.b"] = dg_total.sum(axis=0)
    dflat_a = da_total @ t["head_a.w"]
    dflat_g = dg_total @ t["head_g.w"]

    n, channels, side, _ = cache["feat_shape"]
    half = channels // 2
    dx = np.concatenate(
        [
            dflat_a.reshape(n, half, side, side),
            dflat_g.reshape(n, half, side, side),
        ],
        axis=1,
    )

    for i in reversed(range(len(cfg.trunk))):
        layer = cfg.trunk[i]
        lcache = cache["layers"][i]
        if layer.kind == "conv":
            _, ccache, pcache = lcache
            dpre, dslope = _prelu_backward(dx, pcache, t[f"trunk{i}.p"])
            grads[f"trunk{i}.p"] = dslope
            dw, db, dx = _conv_backward(dpre, t[f"trunk{i}.w"], ccache)
            grads[f"trunk{i}.w"] = dw
            grads[f"trunk{i}.b"] = db
        else:
            _, c1, p1, c2, p2 = lcache
            dpre2, dslope2 = _prelu_backward(dx, p2, t[f"trunk{i}.p2"])
            grads[f"trunk{i}.p2"] = dslope2
            dw2, db2, dact1 = _conv_backward(dpre2, t[f"trunk{i}.w2"], c2)
            grads[f"trunk{i}.w2"] = dw2
            grads[f"trunk{i}.b2"] = db2
            dpre1, dslope1 = _prelu_backward(dact1, p1, t[f"trunk{i}.p1"])
            grads[f"trunk{i}.p1"] = dslope1
            dw1, db1, dres = _conv_backward(dpre1, t[f"trunk{i}.w1"], c1)
            grads[f"trunk{i}.w1"] = dw1
            grads[f"trunk{i}.b1"] = db1
            dx = dres + dx  # shortcut identity path
    return grads, dx


def gradcheck_config(n_classes: int = 3) -> NetConfig:
    """Small full-architecture config sized for finite-difference sweeps."""
    return NetConfig(
        input_size=(8, 8, 1),
        trunk=("conv:4:2", "res:4"),
        d=3,
        d_prime=4,
        n_classes=n_classes,
    )


@dataclass(frozen=True)
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tolerance: float
    step: float
    worst_tensor: str
    n_parameters: int
    precision: str = "f64"


def _fd_denominator(analytic: float, numeric: float) -> float:
    return max(abs(analytic), abs(numeric), 1e-4)


def grad_check(
    cfg: NetConfig | None = None,
    seed: int = 0,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    loss_cfg: LossConfig | None = None,
    precision: str = "f64",
) -> GradCheckReport:
    """Compare every parameter gradient against central finite differences.

    Builds a random triplet batch, runs forward + total loss + backward, and
    sweeps every parameter coordinate. Inputs are resampled until all PReLU
    preactivations, hinge margins, and cosine magnitudes sit safely away
    from their kinks, so the finite differences probe a smooth
    neighborhood. precision "f32" rounds each loss evaluation to float32
    before differencing, quantifying what lower-precision accumulation does
    to the check.
    """
    cfg = cfg if cfg is not None else gradcheck_config()
    loss_cfg = loss_cfg if loss_cfg is not None else LossConfig()
    if precision not in ("f64", "f32"):
        raise ValueError("precision must be 'f64' or 'f32'")
    params = init_params(cfg, seed)
    n = 2
    w, _, c = cfg.input_size

    batch = None
    disparity = None
    labels_q = labels_n = None
    for attempt in range(64):
        rng = keyed_rng(STREAM_GRADCHECK, seed, attempt)
        candidate = rng.uniform(-1.0, 1.0, size=(3 * n, c, w, w))
        labels_q = rng.integers(0, cfg.n_classes, size=n)
        labels_n = rng.integers(0, cfg.n_classes, size=n)
        triple, _, cache = forward(params, candidate)
        margin_ok = _kink_margin(cache) > 10.0 * step
        cos_ok = np.abs(_all_cosines(triple, params, n)).max() < 0.999
        if margin_ok and cos_ok:
            batch = candidate
            # Disparities placed so each hinge margin is +/-0.2 from zero:
            # half the batch active, half inactive, all far from the kink.
            g_q = triple.geometry[:n]
            g_n = triple.geometry[2 * n :]
            cos_n = np.array(
                [
                    float(g_q[i] @ g_n[i] / (np.linalg.norm(g_q[i]) * np.linalg.norm(g_n[i])))
                    for i in range(n)
                ]
            )
            offsets = np.where(np.arange(n) % 2 == 0, -0.2, 0.2)
            disparity = np.maximum((cos_n - offsets) / max(loss_cfg.geo_margin, 1e-9), 0.0)
            break
    if batch is None:
        raise RuntimeError("could not find a kink-free random instance")

    def evaluate(p: NetParams) -> float:
        triple_all, _, _ = forward(p, batch)
        q = EmbeddingTriple(
            triple_all.appearance[:n], triple_all.geometry[:n], triple_all.combined[:n]
        )
        nb = EmbeddingTriple(
            triple_all.appearance[n : 2 * n],
            triple_all.geometry[n : 2 * n],
            triple_all.combined[n : 2 * n],
        )
        wp = EmbeddingTriple(
            triple_all.appearance[2 * n :],
            triple_all.geometry[2 * n :],
            triple_all.combined[2 * n :],
        )
        value = total_loss(
            q, nb, wp, labels_q, labels_n, disparity, p.classifier, loss_cfg
        ).value
        return float(np.float32(value)) if precision == "f32" else value

    # Analytic gradient: one batched forward/backward plus the loss grads.
    triple_all, _, cache = forward(params, batch)
    q = EmbeddingTriple(
        triple_all.appearance[:n], triple_all.geometry[:n], triple_all.combined[:n]
    )
    nb = EmbeddingTriple(
        triple_all.appearance[n : 2 * n],
        triple_all.geometry[n : 2 * n],
        triple_all.combined[n : 2 * n],
    )
    wp = EmbeddingTriple(
        triple_all.appearance[2 * n :],
        triple_all.geometry[2 * n :],
        triple_all.combined[2 * n :],
    )
    result = total_loss(q, nb, wp, labels_q, labels_n, disparity, params.classifier, loss_cfg)
    d_a = np.concatenate(
        [result.d_query.d_appearance, result.d_neighbor.d_appearance, result.d_warped.d_appearance]
    )
    d_g = np.concatenate(
        [result.d_query.d_geometry, result.d_neighbor.d_geometry, result.d_warped.d_geometry]
    )
    d_z = np.concatenate(
        [result.d_query.d_combined, result.d_neighbor.d_combined, result.d_warped.d_combined]
    )
    grads, _ = backward(params, cache, (d_a, d_g, d_z))
    grads["classifier.w"] = grads["classifier.w"] + result.d_weights

    probe = params.clone()
    max_rel = 0.0
    worst = ""
    for name, tensor in probe.tensors.items():
        flat = tensor.reshape(-1)
        gflat = grads[name].reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + step
            hi = evaluate(probe)
            flat[idx] = original - step
            lo = evaluate(probe)
            flat[idx] = original
            numeric = (hi - lo) / (2.0 * step)
            rel = abs(gflat[idx] - numeric) / _fd_denominator(gflat[idx], numeric)
            if rel > max_rel:
                max_rel = rel
                worst = f"{name}[{idx}]"
    return GradCheckReport(
        passed=max_rel < tolerance,
        max_rel_error=max_rel,
        tolerance=tolerance,
        step=step,
        worst_tensor=worst,
        n_parameters=params.n_parameters(),
        precision=precision,
    )


def _kink_margin(cache: dict) -> float:
    """Smallest |preactivation| across all PReLU inputs in the cache."""
    margin = np.inf
    for lcache in cache["layers"]:
        if lcache[0] == "conv":
            margin = min(margin, float(np.abs(lcache[2]).min()))
        else:
            margin = min(margin, float(np.abs(lcache[2]).min()), float(np.abs(lcache[4]).min()))
    return margin


def _all_cosines(triple, params: NetParams, n: int) -> np.ndarray:
    z = triple.combined[: 2 * n]
    w = params.classifier
    zn = np.linalg.norm(z, axis=1, keepdims=True)
    wn = np.linalg.norm(w, axis=1, keepdims=True)
    return (z / zn) @ (w / wn).T
