"""Knowledge-graph embedding models: TransE and the bilinear tensor layer.

Scoring convention everywhere: lower score means more likely true.  The
tensor-layer score combines a per-relation bilinear term, a linear term on
the concatenated pair and a bias, squashed by tanh and reduced to a scalar
with a per-relation combination vector.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import Vocab
from .ioutil import SchemaError, read_json, write_json

MODEL_FORMAT = "kgrec-model-v1"

VARIANTS = ("transe", "ntl", "sntl")


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters shared by all model variants.

    `alpha` and `s` only matter for the smoothed objective; `train_u` toggles
    whether the combination vector is trained or frozen at all-ones
    (slice-sum mode).
    """

    d: int = 60
    k: int = 6
    gamma: float = 1.0
    alpha: float = 0.5
    s: float = 0.1
    epochs: int = 300
    batch_size: int = 10000
    learning_rate: float = 0.1
    optimizer: str = "gd"
    seed: int = 0
    train_u: bool = True

    def validate(self) -> None:
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.s < 0:
            raise ValueError(f"s must be >= 0, got {self.s}")
        if self.optimizer not in ("gd", "rmsprop"):
            raise ValueError(f"unknown optimizer: {self.optimizer!r}")


@dataclass
class NtlRelation:
    """Per-relation tensor-layer parameters."""

    W: np.ndarray  # (d, d, k)
    V: np.ndarray  # (k, 2d)
    b: np.ndarray  # (k,)
    u: np.ndarray  # (k,)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "V": self.V, "b": self.b, "u": self.u}


@dataclass
class TranseRelation:
    """Per-relation translation vector."""

    t: np.ndarray  # (d,)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"t": self.t}


@dataclass
class KgModel:
    variant: str
    config: ModelConfig
    entities: Vocab
    relations: Vocab
    entity_vecs: np.ndarray  # (|E|, d), row i = embedding of entity id i
    rel_params: dict[int, NtlRelation | TranseRelation]  # keyed by relation id

    @property
    def d(self) -> int:
        return self.entity_vecs.shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every parameter (shared memory)."""
        params = {"entities": self.entity_vecs}
        for rid in sorted(self.rel_params):
            label = self.relations.labels[rid]
            for name, arr in self.rel_params[rid].arrays().items():
                params[f"rel:{label}:{name}"] = arr
        return params

    def trainable_keys(self) -> list[str]:
        keys = list(self.parameters())
        if self.variant in ("ntl", "sntl") and not self.config.train_u:
            keys = [k for k in keys if not k.endswith(":u")]
        return keys

    def copy(self) -> "KgModel":
        rel_params: dict[int, NtlRelation | TranseRelation] = {}
        for rid, p in self.rel_params.items():
            arrays = {name: arr.copy() for name, arr in p.arrays().items()}
            rel_params[rid] = type(p)(**arrays)
        return KgModel(
            variant=self.variant,
            config=self.config,
            entities=self.entities,
            relations=self.relations,
            entity_vecs=self.entity_vecs.copy(),
            rel_params=rel_params,
        )


def init_model(
    config: ModelConfig,
    entity_count: int,
    relation_list: Sequence[str],
    variant: str = "sntl",
    entity_labels: Sequence[str] | None = None,
) -> KgModel:
    """Seeded initialization: uniform entity rows in +-0.5/sqrt(d), fan-in
    scaled W and V, zero biases, all-ones combination vectors.

    `entity_labels` names the rows for checkpointing; defaults to e0..eN-1.
    """
    config.validate()
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant: {variant!r}")
    if entity_count < 1:
        raise ValueError(f"entity_count must be >= 1, got {entity_count}")
    if entity_labels is None:
        entity_labels = [f"e{i}" for i in range(entity_count)]
    if len(entity_labels) != entity_count:
        raise ValueError("entity_labels length must equal entity_count")
    rng = np.random.default_rng(config.seed)
    d, k = config.d, config.k
    bound = 0.5 / np.sqrt(d)
    entity_vecs = rng.uniform(-bound, bound, size=(entity_count, d))

    rel_params: dict[int, NtlRelation | TranseRelation] = {}
    for rid in range(len(relation_list)):
        if variant == "transe":
            rel_params[rid] = TranseRelation(t=rng.uniform(-bound, bound, size=d))
        else:
            rel_params[rid] = NtlRelation(
                W=rng.uniform(-bound, bound, size=(d, d, k)),
                V=rng.uniform(-0.5 / np.sqrt(2 * d), 0.5 / np.sqrt(2 * d), size=(k, 2 * d)),
                b=np.zeros(k),
                u=np.ones(k),
            )
    return KgModel(
        variant=variant,
        config=config,
        entities=Vocab(entity_labels),
        relations=Vocab(relation_list),
        entity_vecs=entity_vecs,
        rel_params=rel_params,
    )


def score(model: KgModel, h_vec: np.ndarray, r: int, t_vec: np.ndarray) -> float:
    """Score one (head-vector, relation, tail-vector) triple; pure function."""
    h = np.asarray(h_vec, dtype=float)
    t = np.asarray(t_vec, dtype=float)
    if h.shape != (model.d,) or t.shape != (model.d,):
        raise ValueError(
            f"expected vectors of dimension {model.d}, got {h.shape} and {t.shape}"
        )
    if r not in model.rel_params:
        raise ValueError(f"relation id {r} not in model")
    return float(score_batch(model, h[None, :], r, t[None, :])[0])


def score_batch(model: KgModel, H: np.ndarray, r: int, T: np.ndarray) -> np.ndarray:
    """Score n (head, r, tail) pairs given as (n, d) vector stacks."""
    params = model.rel_params[r]
    if isinstance(params, TranseRelation):
        return np.linalg.norm(H + params.t[None, :] - T, axis=1)
    z = ntl_preactivation(params, H, T)
    return np.tanh(z) @ params.u


def ntl_preactivation(params: NtlRelation, H: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Per-slice pre-tanh activation: bilinear + linear + bias, shape (n, k)."""
    bilinear = np.einsum("nd,dek,ne->nk", H, params.W, T)
    linear = np.concatenate([H, T], axis=1) @ params.V.T
    return bilinear + linear + params.b[None, :]


def score_id_triples(
    model: KgModel,
    triples: Sequence[tuple[int, int, int]],
    entity_offsets: np.ndarray | None = None,
) -> np.ndarray:
    """Score stored-entity triples, optionally with additive embedding offsets.

    `entity_offsets` has the entity-table shape and stands for a perturbed
    embedding; rows of entities not in the batch are ignored.
    """
    vecs = model.entity_vecs if entity_offsets is None else model.entity_vecs + entity_offsets
    heads = np.fromiter((t[0] for t in triples), dtype=int, count=len(triples))
    rels = np.fromiter((t[1] for t in triples), dtype=int, count=len(triples))
    tails = np.fromiter((t[2] for t in triples), dtype=int, count=len(triples))
    out = np.empty(len(triples))
    for r in np.unique(rels):
        mask = rels == r
        out[mask] = score_batch(model, vecs[heads[mask]], int(r), vecs[tails[mask]])
    return out


def save_model(model: KgModel, path: str | Path) -> None:
    rel_out = {}
    for rid, params in model.rel_params.items():
        label = model.relations.labels[rid]
        rel_out[label] = {name: arr.tolist() for name, arr in params.arrays().items()}
    write_json(
        path,
        {
            "format": MODEL_FORMAT,
            "variant": model.variant,
            "d": model.config.d,
            "k": model.config.k,
            "entities": list(model.entities.labels),
            "relations": list(model.relations.labels),
            "entity_vecs": model.entity_vecs.tolist(),
            "relation_params": rel_out,
            "config": asdict(model.config),
        },
    )


def load_model(path: str | Path) -> KgModel:
    obj = read_json(path, MODEL_FORMAT)
    variant = obj["variant"]
    if variant not in VARIANTS:
        raise SchemaError(f"{path}: unknown variant {variant!r}")
    config = ModelConfig(**obj["config"])
    entities = Vocab(obj["entities"])
    relations = Vocab(obj["relations"])
    entity_vecs = np.asarray(obj["entity_vecs"], dtype=float)
    if entity_vecs.shape != (len(entities), config.d):
        raise SchemaError(f"{path}: entity_vecs shape {entity_vecs.shape} mismatch")
    rel_params: dict[int, NtlRelation | TranseRelation] = {}
    for label, arrays in obj["relation_params"].items():
        rid = relations.id(label)
        if variant == "transe":
            rel_params[rid] = TranseRelation(t=np.asarray(arrays["t"], dtype=float))
        else:
            rel_params[rid] = NtlRelation(
                W=np.asarray(arrays["W"], dtype=float),
                V=np.asarray(arrays["V"], dtype=float),
                b=np.asarray(arrays["b"], dtype=float),
                u=np.asarray(arrays["u"], dtype=float),
            )
    if set(rel_params) != set(range(len(relations))):
        raise SchemaError(f"{path}: relation_params do not cover the relation list")
    return KgModel(
        variant=variant,
        config=config,
        entities=entities,
        relations=relations,
        entity_vecs=entity_vecs,
        rel_params=rel_params,
    )
