"""Convolutional detector mapping a window tensor to per-cell incident
probabilities, trained from scratch with exact analytic gradients.

Architecture: 2x2 same-padding convolution -> 2x2 max pool (stride 2) ->
2x2 same-padding convolution -> flatten -> dense(2 * n_out, ReLU) ->
dense(n_out, sigmoid), with n_out = nx * ny so there is one sigmoid unit per
grid cell. Convolutions are linear by default (``conv_activation`` switches
ReLU on). Same padding is zero-fill on the high-index edge, so spatial
alignment with the grid is preserved.

Training is deterministic given the seed: mini-batch SGD with momentum 0.9,
epoch count and decision threshold chosen by k-fold cross-validation on mean
F1, then a final retrain on all data. Inference is pure and thread-safe on an
immutable model.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .grid import CellIndex

MOMENTUM = 0.9
PREDICT_BATCH = 256
PROB_CLIP = 1e-12
MODEL_MAGIC = b"CDCNNv1\n"

DEFAULT_THRESHOLD_GRID = tuple(np.round(np.arange(0.05, 0.96, 0.05), 2))


class TrainingError(RuntimeError):
    """Training cannot proceed (e.g. no positive labels in the data)."""


@dataclass(frozen=True)
class CnnSpec:
    """Network shape; all sizes derive from the grid and input channels."""

    nx: int
    ny: int
    channels: int
    filters: int = 32
    conv_activation: str = "linear"  # "linear" | "relu"

    def __post_init__(self) -> None:
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"grid must be at least 4x4 for pooling, got {self.nx}x{self.ny}")
        if self.channels < 1 or self.filters < 1:
            raise ValueError("channels and filters must be >= 1")
        if self.conv_activation not in ("linear", "relu"):
            raise ValueError(f"conv_activation must be 'linear' or 'relu': {self.conv_activation}")

    @property
    def pooled(self) -> tuple[int, int]:
        return (self.nx + 1) // 2, (self.ny + 1) // 2

    @property
    def n_out(self) -> int:
        return self.nx * self.ny

    @property
    def flat_dim(self) -> int:
        hx, hy = self.pooled
        return hx * hy * self.filters

    @property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        f, c = self.filters, self.channels
        return (
            (2, 2, c, f), (f,),
            (2, 2, f, f), (f,),
            (self.flat_dim, 2 * self.n_out), (2 * self.n_out,),
            (2 * self.n_out, self.n_out), (self.n_out,),
        )

    @property
    def n_weights(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes)

    def to_dict(self) -> dict:
        return {
            "nx": self.nx, "ny": self.ny, "channels": self.channels,
            "filters": self.filters, "conv_activation": self.conv_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CnnSpec":
        return cls(int(d["nx"]), int(d["ny"]), int(d["channels"]),
                   int(d["filters"]), d.get("conv_activation", "linear"))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 64
    learning_rate: float = 0.01
    pos_weight: Optional[float] = None  # None -> negatives/positives on the training data
    threshold_grid: tuple = DEFAULT_THRESHOLD_GRID
    folds: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.folds < 1:
            raise ValueError("epochs, batch_size and folds must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.pos_weight is not None and self.pos_weight < 1:
            raise ValueError("pos_weight must be >= 1")
        if not self.threshold_grid or not all(0 < t < 1 for t in self.threshold_grid):
            raise ValueError("threshold_grid values must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size,
            "learning_rate": self.learning_rate, "pos_weight": self.pos_weight,
            "threshold_grid": [float(t) for t in self.threshold_grid],
            "folds": self.folds, "seed": self.seed,
        }


@dataclass(frozen=True)
class TrainedModel:
    spec: CnnSpec
    weights: np.ndarray
    threshold: float
    train_manifest: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.weights.shape != (self.spec.n_weights,):
            raise ValueError(
                f"weight vector length {self.weights.shape} does not match spec ({self.spec.n_weights},)"
            )
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1): {self.threshold}")


# ---------------------------------------------------------------------------
# layers


def unpack(spec: CnnSpec, weights: np.ndarray) -> list[np.ndarray]:
    """Views of the flat weight vector as the per-layer arrays."""
    params = []
    offset = 0
    for shape in spec.shapes:
        size = int(np.prod(shape))
        params.append(weights[offset : offset + size].reshape(shape))
        offset += size
    return params


def init_weights(spec: CnnSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform(+-sqrt(6 / (fan_in + fan_out))) weights, zero biases."""
    chunks = []
    for shape in spec.shapes:
        if len(shape) == 1:
            chunks.append(np.zeros(shape))
            continue
        if len(shape) == 4:
            fan_in = shape[0] * shape[1] * shape[2]
            fan_out = shape[0] * shape[1] * shape[3]
        else:
            fan_in, fan_out = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=shape).ravel())
    return np.concatenate([c.ravel() for c in chunks])


def conv2x2_same(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padding 2x2 convolution; zero fill on the high-index edge.

    x: (B, nx, ny, C); w: (2, 2, C, F). Returns (y, padded_x) with y of shape
    (B, nx, ny, F).
    """
    bsz, nx, ny, c = x.shape
    xp = np.zeros((bsz, nx + 1, ny + 1, c))
    xp[:, :nx, :ny] = x
    y = np.broadcast_to(b, (bsz, nx, ny, w.shape[3])).copy()
    for di in (0, 1):
        for dj in (0, 1):
            y += xp[:, di : di + nx, dj : dj + ny, :] @ w[di, dj]
    return y, xp


def conv2x2_same_backward(dy: np.ndarray, xp: np.ndarray, w: np.ndarray):
    """Gradients of conv2x2_same w.r.t. input, weights and bias."""
    bsz, nx, ny, _ = dy.shape
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp)
    for di in (0, 1):
        for dj in (0, 1):
            tap = xp[:, di : di + nx, dj : dj + ny, :]
            dw[di, dj] = np.tensordot(tap, dy, axes=([0, 1, 2], [0, 1, 2]))
            dxp[:, di : di + nx, dj : dj + ny, :] += dy @ w[di, dj].T
    db = dy.sum(axis=(0, 1, 2))
    return dxp[:, :nx, :ny, :], dw, db


def maxpool2x2(x: np.ndarray):
    """2x2 max pooling with stride 2; odd edges are padded with -inf so the
    output size is the ceiling of half the input."""
    bsz, nx, ny, f = x.shape
    hx, hy = (nx + 1) // 2, (ny + 1) // 2
    xp = np.full((bsz, 2 * hx, 2 * hy, f), -np.inf)
    xp[:, :nx, :ny] = x
    v = xp.reshape(bsz, hx, 2, hy, 2, f).transpose(0, 1, 3, 5, 2, 4).reshape(bsz, hx, hy, f, 4)
    am = np.argmax(v, axis=4)  # first max in scan order: deterministic tie-break
    y = np.take_along_axis(v, am[..., None], axis=4)[..., 0]
    return y, (am, nx, ny)


def maxpool2x2_backward(dy: np.ndarray, cache) -> np.ndarray:
    am, nx, ny = cache
    bsz, hx, hy, f = dy.shape
    dv = np.zeros((bsz, hx, hy, f, 4))
    np.put_along_axis(dv, am[..., None], dy[..., None], axis=4)
    dxp = dv.reshape(bsz, hx, hy, f, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(bsz, 2 * hx, 2 * hy, f)
    return dxp[:, :nx, :ny, :]


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_cached(spec: CnnSpec, weights: np.ndarray, x: np.ndarray):
    """Forward pass over a batch, keeping intermediates for the backward pass."""
    w1, b1, w2, b2, wd1, bd1, wd2, bd2 = unpack(spec, weights)
    relu_convs = spec.conv_activation == "relu"
    c1, xp1 = conv2x2_same(x, w1, b1)
    a1 = np.maximum(c1, 0.0) if relu_convs else c1
    p1, pool_cache = maxpool2x2(a1)
    c2, xp2 = conv2x2_same(p1, w2, b2)
    a2 = np.maximum(c2, 0.0) if relu_convs else c2
    xf = a2.reshape(x.shape[0], spec.flat_dim)
    z1 = xf @ wd1 + bd1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ wd2 + bd2
    probs = sigmoid(z2)
    cache = (xp1, c1, pool_cache, xp2, c2, xf, z1, h1)
    return probs, cache


def forward_batch(spec: CnnSpec, weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Per-cell probabilities for a batch of inputs (B, nx, ny, C) ->
    (B, nx, ny)."""
    probs, _ = _forward_cached(spec, weights, x)
    return probs.reshape(x.shape[0], spec.nx, spec.ny)


def forward(model: TrainedModel, x: np.ndarray) -> np.ndarray:
    """Probability grid for a single input of shape (nx, ny, channels)."""
    x = np.asarray(x, dtype=np.float64)
    expected = (model.spec.nx, model.spec.ny, model.spec.channels)
    if x.shape != expected:
        raise ValueError(f"input shape {x.shape} does not match spec {expected}")
    if not np.isfinite(x).all():
        raise ValueError("input contains non-finite values")
    return forward_batch(model.spec, model.weights, x[None])[0]


def loss_and_grad(
    spec: CnnSpec,
    weights: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    pos_weight: float = 1.0,
):
    """Weighted binary cross-entropy (mean over examples and cells) and its
    exact gradient w.r.t. the flat weight vector.

    Probabilities are clamped to [1e-12, 1 - 1e-12] inside the logs; the
    gradient uses the standard sigmoid + cross-entropy form, exact wherever
    the clamp is inactive.
    """
    if x.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    w1, b1, w2, b2, wd1, bd1, wd2, bd2 = unpack(spec, weights)
    bsz = x.shape[0]
    probs, cache = _forward_cached(spec, weights, x)
    xp1, c1, pool_cache, xp2, c2, xf, z1, h1 = cache
    yf = y.reshape(bsz, spec.n_out).astype(np.float64)
    wgt = np.where(yf > 0, pos_weight, 1.0)
    denom = float(bsz * spec.n_out)
    pc = np.clip(probs, PROB_CLIP, 1.0 - PROB_CLIP)
    loss = float(-(wgt * (yf * np.log(pc) + (1.0 - yf) * np.log1p(-pc))).sum() / denom)

    dz2 = wgt * (probs - yf) / denom
    dwd2 = h1.T @ dz2
    dbd2 = dz2.sum(axis=0)
    dh1 = dz2 @ wd2.T
    dz1 = dh1 * (z1 > 0)
    dwd1 = xf.T @ dz1
    dbd1 = dz1.sum(axis=0)
    dxf = dz1 @ wd1.T
    hx, hy = spec.pooled
    da2 = dxf.reshape(bsz, hx, hy, spec.filters)
    if spec.conv_activation == "relu":
        da2 = da2 * (c2 > 0)
    dp1, dw2, db2 = conv2x2_same_backward(da2, xp2, w2)
    da1 = maxpool2x2_backward(dp1, pool_cache)
    if spec.conv_activation == "relu":
        da1 = da1 * (c1 > 0)
    _, dw1, db1 = conv2x2_same_backward(da1, xp1, w1)

    grad = np.concatenate(
        [g.ravel() for g in (dw1, db1, dw2, db2, dwd1, dbd1, dwd2, dbd2)]
    )
    return loss, grad


# ---------------------------------------------------------------------------
# training


class ArraySource:
    """Window source backed by materialized arrays (mostly for tests)."""

    def __init__(self, inputs: np.ndarray, labels: np.ndarray):
        if inputs.shape[0] != labels.shape[0]:
            raise ValueError("inputs and labels must have the same length")
        self._x = np.asarray(inputs, dtype=np.float64)
        self._y = np.asarray(labels)

    def __len__(self) -> int:
        return self._x.shape[0]

    def inputs(self, idx: np.ndarray) -> np.ndarray:
        return self._x[idx]

    def labels(self, idx: np.ndarray) -> np.ndarray:
        return self._y[idx]


def _sgd_epoch(spec, weights, velocity, source, idx, cfg, pos_weight, rng):
    """One epoch of shuffled mini-batch SGD with momentum; returns mean loss."""
    order = idx[rng.permutation(len(idx))]
    total = 0.0
    for start in range(0, len(order), cfg.batch_size):
        batch = order[start : start + cfg.batch_size]
        x = source.inputs(batch)
        y = source.labels(batch)
        loss, grad = loss_and_grad(spec, weights, x, y, pos_weight)
        velocity *= MOMENTUM
        velocity -= cfg.learning_rate * grad
        weights += velocity
        total += loss * len(batch)
    return total / len(order)


def predict_source(spec, weights, source, idx, batch: int = PREDICT_BATCH) -> np.ndarray:
    """Probabilities for the given window indices, batched; (n, nx, ny)."""
    out = np.empty((len(idx), spec.nx, spec.ny))
    for start in range(0, len(idx), batch):
        sel = idx[start : start + batch]
        out[start : start + len(sel)] = forward_batch(spec, weights, source.inputs(sel))
    return out


def _f1_curve(probs: np.ndarray, labels: np.ndarray, thresholds) -> np.ndarray:
    """F1 at each threshold for flattened probabilities vs binary labels."""
    flat = probs.ravel()
    lab = labels.ravel().astype(bool)
    pos = np.sort(flat[lab])
    neg = np.sort(flat[~lab])
    out = np.empty(len(thresholds))
    for i, t in enumerate(thresholds):
        tp = pos.size - int(np.searchsorted(pos, t, side="left"))
        fp = neg.size - int(np.searchsorted(neg, t, side="left"))
        fn = pos.size - tp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        out[i] = 2 * p * r / (p + r) if p + r else 0.0
    return out


def _fold_blocks(n: int, k: int) -> list[np.ndarray]:
    """Contiguous (time-ordered) index blocks for k-fold validation."""
    edges = np.linspace(0, n, k + 1).astype(int)
    return [np.arange(edges[i], edges[i + 1]) for i in range(k)]


def _data_fingerprint(source, labels_all: np.ndarray, spec: CnnSpec) -> str:
    h = hashlib.sha256()
    h.update(np.int64(len(source)).tobytes())
    h.update(np.int64(spec.channels).tobytes())
    h.update(np.ascontiguousarray(labels_all, dtype=np.int8).tobytes())
    return h.hexdigest()[:16]


def train(source, spec: CnnSpec, cfg: TrainConfig) -> TrainedModel:
    """Cross-validated training: epoch count and threshold maximize mean
    validation F1 over the folds, then the final model retrains on all data.

    With folds == 1 no cross-validation runs; the epoch count is taken as
    given and the threshold is picked on the training predictions.
    Deterministic given cfg.seed.
    """
    n = len(source)
    all_idx = np.arange(n)
    labels_all = source.labels(all_idx)
    n_pos = int(np.count_nonzero(labels_all))
    if n_pos == 0:
        raise TrainingError("training data contains no positive cells")
    n_cells = int(np.prod(labels_all.shape))
    pos_weight = cfg.pos_weight if cfg.pos_weight is not None else max(
        1.0, (n_cells - n_pos) / n_pos
    )

    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.folds + 1)
    thresholds = np.asarray(cfg.threshold_grid, dtype=np.float64)

    if cfg.folds >= 2:
        blocks = _fold_blocks(n, cfg.folds)
        cv_f1 = np.zeros((cfg.folds, cfg.epochs, len(thresholds)))
        for f, val_idx in enumerate(blocks):
            train_idx = np.concatenate([b for i, b in enumerate(blocks) if i != f])
            rng = np.random.Generator(np.random.PCG64(seeds[f]))
            weights = init_weights(spec, rng)
            velocity = np.zeros_like(weights)
            val_labels = source.labels(val_idx)
            for e in range(cfg.epochs):
                _sgd_epoch(spec, weights, velocity, source, train_idx, cfg, pos_weight, rng)
                probs = predict_source(spec, weights, source, val_idx)
                cv_f1[f, e] = _f1_curve(probs, val_labels, thresholds)
        mean_f1 = cv_f1.mean(axis=0)
        flat_best = int(np.argmax(mean_f1))  # first max: smallest epoch, then threshold
        best_epoch, best_thr_idx = np.unravel_index(flat_best, mean_f1.shape)
        best_epochs = int(best_epoch) + 1
        cv_summary = {
            "mean_f1": float(mean_f1[best_epoch, best_thr_idx]),
            "per_fold_f1": [float(cv_f1[f, best_epoch, best_thr_idx]) for f in range(cfg.folds)],
        }
    else:
        best_epochs = cfg.epochs
        best_thr_idx = None
        cv_summary = None

    rng = np.random.Generator(np.random.PCG64(seeds[cfg.folds]))
    weights = init_weights(spec, rng)
    velocity = np.zeros_like(weights)
    epoch_losses = []
    for _ in range(best_epochs):
        epoch_losses.append(_sgd_epoch(spec, weights, velocity, source, all_idx, cfg, pos_weight, rng))

    if best_thr_idx is None:
        probs = predict_source(spec, weights, source, all_idx)
        curve = _f1_curve(probs, labels_all, thresholds)
        best_thr_idx = int(np.argmax(curve))
    threshold = float(thresholds[best_thr_idx])

    manifest = {
        "config": cfg.to_dict(),
        "spec": spec.to_dict(),
        "pos_weight": float(pos_weight),
        "chosen_epochs": best_epochs,
        "threshold": threshold,
        "cv": cv_summary,
        "epoch_losses": [float(l) for l in epoch_losses],
        "data_fingerprint": _data_fingerprint(source, labels_all, spec),
    }
    return TrainedModel(spec=spec, weights=weights, threshold=threshold, train_manifest=manifest)


def detect(model: TrainedModel, window) -> list[CellIndex]:
    """Cells whose probability reaches the model's threshold, in (x, y) order.

    Accepts a featurizer Window or a raw (nx, ny, channels) array.
    """
    from .features import Window, to_input  # local import to avoid a cycle

    x = to_input(window) if isinstance(window, Window) else np.asarray(window, dtype=np.float64)
    probs = forward(model, x)
    xs, ys = np.nonzero(probs >= model.threshold)
    return [CellIndex(int(a), int(b)) for a, b in zip(xs, ys)]


# ---------------------------------------------------------------------------
# model files


def save_model(model: TrainedModel, path) -> Path:
    """Versioned binary: magic, JSON header (spec + threshold), little-endian
    float64 weights; the train manifest goes to a JSON sidecar."""
    path = Path(path)
    header = json.dumps(
        {"format": "crowddetect-cnn", "version": 1, "spec": model.spec.to_dict(),
         "threshold": model.threshold}
    ).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(model.weights, dtype="<f8").tobytes())
    sidecar = path.with_suffix(path.suffix + ".manifest.json")
    sidecar.write_text(json.dumps(model.train_manifest, indent=2, sort_keys=True) + "\n",
                       encoding="utf-8")
    return path


def load_model(path) -> TrainedModel:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic)")
    off = len(MODEL_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    if header.get("version") != 1:
        raise ValueError(f"{path}: unsupported model version {header.get('version')}")
    off += hlen
    spec = CnnSpec.from_dict(header["spec"])
    weights = np.frombuffer(raw[off:], dtype="<f8").copy()
    sidecar = path.with_suffix(path.suffix + ".manifest.json")
    manifest = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    return TrainedModel(spec=spec, weights=weights, threshold=float(header["threshold"]),
                        train_manifest=manifest)
