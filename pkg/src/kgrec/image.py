"""Map image feature vectors into the semantic space.

The embedder is a small dense network ending in L2 normalization, trained
with RMSProp on the mean squared distance to each image's entity vector.
Dropout (inverted scaling) is active only while training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .ioutil import SchemaError, read_json, write_json
from .optim import RmsProp

log = logging.getLogger(__name__)

FEATURES_FORMAT = "kgrec-features-v1"
EMBEDDER_FORMAT = "kgrec-embedder-v1"

# Reserved label for open-world images with no known entity.
UNLABELED = "?"

_NORM_EPS = 1e-12


@dataclass(frozen=True)
class FeatureRecord:
    """One line of a feature file; label may be the reserved `?`."""

    image_id: str
    label: str
    vector: np.ndarray


@dataclass(frozen=True)
class LabeledFeature:
    """A feature vector bound to an entity row index (training input)."""

    image_id: str
    entity: int
    feature: np.ndarray


@dataclass(frozen=True)
class EmbedderConfig:
    hidden: tuple[int, ...] = (256,)
    dropout_rate: float = 0.3
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden widths must be >= 1, got {self.hidden}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


class ImageEmbedder:
    """Dense layers with tanh hidden activations and unit-norm output."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray],
                 dropout_rate: float = 0.0):
        if len(weights) != len(biases) or not weights:
            raise ValueError("weights and biases must be non-empty and aligned")
        self.weights = weights
        self.biases = biases
        self.dropout_rate = dropout_rate

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def forward_train(self, X: np.ndarray, rng: np.random.Generator):
        """Training-mode pass with dropout; returns output and backprop cache."""
        acts = [X]
        masks: list[np.ndarray | None] = []
        h = X
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ W.T + b)
            if self.dropout_rate > 0:
                keep = 1.0 - self.dropout_rate
                mask = (rng.random(h.shape) < keep) / keep
                h = h * mask
                masks.append(mask)
            else:
                masks.append(None)
            acts.append(h)
        z = h @ self.weights[-1].T + self.biases[-1]
        norms = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), _NORM_EPS)
        y = z / norms
        return y, (acts, masks, z, norms)


def embed(embedder: ImageEmbedder, feature: np.ndarray) -> np.ndarray:
    """Inference pass: no dropout, output L2-normalized; pure function."""
    x = np.asarray(feature, dtype=float)
    if x.shape != (embedder.dims[0],):
        raise ValueError(
            f"expected feature of dimension {embedder.dims[0]}, got shape {x.shape}"
        )
    h = x
    for W, b in zip(embedder.weights[:-1], embedder.biases[:-1]):
        h = np.tanh(W @ h + b)
    z = embedder.weights[-1] @ h + embedder.biases[-1]
    norm = float(np.linalg.norm(z))
    if norm < _NORM_EPS:
        raise ValueError("embedder output vanished before normalization")
    return z / norm


def embed_batch(embedder: ImageEmbedder, X: np.ndarray) -> np.ndarray:
    """Vectorized inference over rows of X."""
    h = np.asarray(X, dtype=float)
    for W, b in zip(embedder.weights[:-1], embedder.biases[:-1]):
        h = np.tanh(h @ W.T + b)
    z = h @ embedder.weights[-1].T + embedder.biases[-1]
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms < _NORM_EPS):
        raise ValueError("embedder output vanished before normalization")
    return z / norms


def class_mean(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean re-normalized to unit length."""
    if len(vectors) == 0:
        raise ValueError("class_mean of empty list")
    mean = np.mean(np.asarray(vectors, dtype=float), axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < _NORM_EPS:
        raise ValueError("class mean vanished (vectors cancel)")
    return mean / norm


def train_embedder(
    data: Sequence[LabeledFeature],
    targets: np.ndarray,
    config: EmbedderConfig,
) -> tuple[ImageEmbedder, list[float]]:
    """Fit the embedder to pull h(x) toward each sample's entity row.

    Mini-batch RMSProp on mean ||h(x) - g(e)||^2; returns the embedder and
    per-epoch training losses (last entry = final loss).  Deterministic for a
    fixed config seed.
    """
    config.validate()
    if len(data) == 0:
        raise ValueError("no training data")
    targets = np.asarray(targets, dtype=float)
    d = targets.shape[1]
    F = data[0].feature.shape[0]
    X = np.empty((len(data), F))
    G = np.empty((len(data), d))
    for i, item in enumerate(data):
        if item.feature.shape != (F,):
            raise ValueError(f"feature dimension mismatch at {item.image_id!r}")
        if not 0 <= item.entity < targets.shape[0]:
            raise ValueError(f"no target row for entity id {item.entity}")
        X[i] = item.feature
        G[i] = targets[item.entity]

    rng = np.random.default_rng(config.seed)
    dims = [F, *config.hidden, d]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    embedder = ImageEmbedder(weights, biases, dropout_rate=config.dropout_rate)

    optimizer = RmsProp(config.learning_rate)
    n = len(data)
    batch_size = min(config.batch_size, n)
    epoch_losses: list[float] = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, grads = _mse_loss_and_grads(embedder, X[idx], G[idx], rng)
            total += loss * len(idx)
            for key, (param, grad) in grads.items():
                optimizer.update(key, param, grad)
        epoch_losses.append(total / n)
    return embedder, epoch_losses


def _mse_loss_and_grads(embedder: ImageEmbedder, X, G, rng):
    """Forward in training mode, then backprop through normalization and layers."""
    B = X.shape[0]
    y, (acts, masks, z, norms) = embedder.forward_train(X, rng)
    diff = y - G
    loss = float(np.sum(diff * diff) / B)

    dy = 2.0 * diff / B
    # y = z / ||z||: dz = (dy - y (y . dy)) / ||z||
    dz = (dy - y * np.sum(y * dy, axis=1, keepdims=True)) / norms

    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    delta = dz
    for layer in range(len(embedder.weights) - 1, -1, -1):
        W = embedder.weights[layer]
        h_in = acts[layer]
        grads[f"W{layer}"] = (W, delta.T @ h_in)
        grads[f"b{layer}"] = (embedder.biases[layer], delta.sum(axis=0))
        if layer > 0:
            back = delta @ W
            mask = masks[layer - 1]
            if mask is not None:
                back = back * mask
            delta = back * (1.0 - acts[layer] * acts[layer])
    return loss, grads


def write_features(path: str | Path, records: Sequence[FeatureRecord], dim: int) -> None:
    """Write the feature-file format: header line then one record per line."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#{FEATURES_FORMAT} dim={dim}\n")
        for rec in records:
            if rec.vector.shape != (dim,):
                raise ValueError(
                    f"record {rec.image_id!r} has dimension {rec.vector.shape[0]}, "
                    f"declared {dim}"
                )
            values = ",".join(repr(float(v)) for v in rec.vector)
            fh.write(f"{rec.image_id}\t{rec.label}\t{values}\n")


def read_features(path: str | Path) -> tuple[list[FeatureRecord], int]:
    """Parse a feature file; returns (records, declared dimension)."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        prefix = f"#{FEATURES_FORMAT} dim="
        if not header.startswith(prefix):
            raise SchemaError(
                f"{path}: schema-version mismatch: expected header {prefix!r}..."
            )
        try:
            dim = int(header[len(prefix):])
        except ValueError:
            raise SchemaError(f"{path}: bad dimension in header: {header!r}") from None
        records = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ValueError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}"
                )
            image_id, label, values = fields
            try:
                vector = np.array([float(v) for v in values.split(",")])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: unparseable feature values") from None
            if vector.shape != (dim,):
                raise ValueError(
                    f"{path}:{lineno}: vector has {vector.shape[0]} values, "
                    f"declared dim={dim}"
                )
            records.append(FeatureRecord(image_id, label, vector))
    return records, dim


def save_embedder(embedder: ImageEmbedder, path: str | Path) -> None:
    write_json(
        path,
        {
            "format": EMBEDDER_FORMAT,
            "dims": embedder.dims,
            "weights": [w.tolist() for w in embedder.weights],
            "biases": [b.tolist() for b in embedder.biases],
        },
    )


def load_embedder(path: str | Path) -> ImageEmbedder:
    obj = read_json(path, EMBEDDER_FORMAT)
    weights = [np.asarray(w, dtype=float) for w in obj["weights"]]
    biases = [np.asarray(b, dtype=float) for b in obj["biases"]]
    dims = obj["dims"]
    embedder = ImageEmbedder(weights, biases)
    if embedder.dims != list(dims):
        raise SchemaError(f"{path}: declared dims {dims} do not match weight shapes")
    return embedder
