"""Context re-scoring: link-frequency attention plus Gaussian score models.

The re-score u mixes the attention a for a (relation, tail) pair with the
likelihoods of the raw score under Gaussians fitted to true and false
training scores: u = a*b1 / (a*b1 + (1-a)*b2).  Higher u means more likely
true, regardless of the raw-score convention.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import TripleStore, corrupt_tail
from .ioutil import SchemaError, read_json, write_json
from .models import KgModel, score_id_triples

log = logging.getLogger(__name__)

CONTEXT_FORMAT = "kgrec-context-v1"

_SIGMA_FLOOR = 1e-6
_DENSITY_GUARD = 1e-300


@dataclass
class ContextStats:
    """Fitted context statistics bound to one model's vocabularies.

    `attention` maps (relation id, tail entity id) to the count of distinct
    head entities linking to that pair in the training set; fractions are
    derived against `known_entity_count`.  `laplace_lambda` > 0 smooths the
    attention fraction to (count + l) / (|E| + 2l).
    """

    attention: dict[tuple[int, int], int]
    known_entity_count: int
    mu_true: float
    sigma_true: float
    mu_false: float
    sigma_false: float
    per_relation: dict[int, tuple[float, float, float, float]] = field(default_factory=dict)
    laplace_lambda: float = 0.0

    def attention_fraction(self, r: int, e: int) -> float:
        count = self.attention.get((r, e), 0)
        lam = self.laplace_lambda
        if lam > 0:
            return (count + lam) / (self.known_entity_count + 2 * lam)
        return count / self.known_entity_count


def fit_context(
    model: KgModel,
    train_store: TripleStore,
    false_sample_size: int,
    rng: np.random.Generator,
    per_relation: bool = False,
    laplace_lambda: float = 0.0,
) -> ContextStats:
    """Count (relation, tail) attention and fit the two score Gaussians.

    True scores come from every training triple; false scores from
    `false_sample_size` tail corruptions of randomly drawn training triples.
    Degenerate fits get the sigma floor with a warning.
    """
    if len(train_store) == 0:
        raise ValueError("train_store is empty")
    if false_sample_size < 2:
        raise ValueError(f"false_sample_size must be >= 2, got {false_sample_size}")

    attention: dict[tuple[int, int], int] = {}
    for t in train_store.triples:
        key = (t.relation, t.tail)
        attention[key] = attention.get(key, 0) + 1

    true_scores = score_id_triples(model, train_store.triples)
    base_idx = rng.integers(len(train_store.triples), size=false_sample_size)
    false_triples = [
        corrupt_tail(train_store.triples[int(i)], train_store, rng) for i in base_idx
    ]
    false_scores = score_id_triples(model, false_triples)

    mu_t, sig_t = _fit_gaussian(true_scores, "true")
    mu_f, sig_f = _fit_gaussian(false_scores, "false")

    per_rel: dict[int, tuple[float, float, float, float]] = {}
    if per_relation:
        rels_true = np.array([t.relation for t in train_store.triples])
        rels_false = np.array([t.relation for t in false_triples])
        for r in range(len(train_store.relations)):
            ts = true_scores[rels_true == r]
            fs = false_scores[rels_false == r]
            if len(ts) >= 2 and len(fs) >= 2:
                per_rel[r] = _fit_gaussian(ts, f"true[{r}]") + _fit_gaussian(
                    fs, f"false[{r}]"
                )

    return ContextStats(
        attention=attention,
        known_entity_count=len(train_store.entities),
        mu_true=mu_t,
        sigma_true=sig_t,
        mu_false=mu_f,
        sigma_false=sig_f,
        per_relation=per_rel,
        laplace_lambda=laplace_lambda,
    )


def _fit_gaussian(scores: np.ndarray, name: str) -> tuple[float, float]:
    mu = float(np.mean(scores))
    sigma = float(np.std(scores))
    if sigma < _SIGMA_FLOOR:
        log.warning("degenerate %s scores (all ~equal); sigma floored", name)
        sigma = _SIGMA_FLOOR
    return mu, sigma


def rescore(stats: ContextStats, raw_score: float, r: int, e: int) -> float:
    """Posterior-style mix of attention and score likelihoods, in [0, 1].

    Likelihoods are combined in log space so extreme raw scores stay
    well-defined; the attention extremes short-circuit exactly as the
    formula's algebra dictates (a=1 -> 1, a=0 -> 0).
    """
    a = stats.attention_fraction(r, e)
    if a <= 0.0:
        return 0.0
    if a >= 1.0:
        return 1.0
    if r in stats.per_relation:
        mu_t, sig_t, mu_f, sig_f = stats.per_relation[r]
    else:
        mu_t, sig_t, mu_f, sig_f = (
            stats.mu_true,
            stats.sigma_true,
            stats.mu_false,
            stats.sigma_false,
        )
    l1 = math.log(a) + _log_gaussian(raw_score, mu_t, sig_t)
    l2 = math.log(1.0 - a) + _log_gaussian(raw_score, mu_f, sig_f)
    m = max(l1, l2)
    num = math.exp(l1 - m)
    den = num + math.exp(l2 - m) + _DENSITY_GUARD
    return num / den


def _log_gaussian(x: float, mu: float, sigma: float) -> float:
    z = (x - mu) / sigma
    return -0.5 * z * z - math.log(sigma) - 0.5 * math.log(2.0 * math.pi)


def save_context(stats: ContextStats, model: KgModel, path: str | Path) -> None:
    """Serialize with labels so the file is model-file independent."""
    rows = []
    for (r, e), count in stats.attention.items():
        rows.append([model.relations.labels[r], model.entities.labels[e], count])
    rows.sort()
    write_json(
        path,
        {
            "format": CONTEXT_FORMAT,
            "mu_true": stats.mu_true,
            "sigma_true": stats.sigma_true,
            "mu_false": stats.mu_false,
            "sigma_false": stats.sigma_false,
            "attention": rows,
            "known_entity_count": stats.known_entity_count,
        },
    )


def load_context(path: str | Path, model: KgModel) -> ContextStats:
    """Load stats and re-bind attention labels to the model's id spaces."""
    obj = read_json(path, CONTEXT_FORMAT)
    attention: dict[tuple[int, int], int] = {}
    for row in obj["attention"]:
        r_label, e_label, count = row
        if r_label not in model.relations or e_label not in model.entities:
            raise SchemaError(
                f"{path}: attention entry ({r_label!r}, {e_label!r}) unknown to model"
            )
        attention[(model.relations.id(r_label), model.entities.id(e_label))] = int(count)
    return ContextStats(
        attention=attention,
        known_entity_count=int(obj["known_entity_count"]),
        mu_true=float(obj["mu_true"]),
        sigma_true=float(obj["sigma_true"]),
        mu_false=float(obj["mu_false"]),
        sigma_false=float(obj["sigma_false"]),
    )
