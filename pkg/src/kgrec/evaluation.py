"""Rank candidate links and report mean rank fraction, t@n and f@n.

Raw mode sorts ascending by score (lower = more likely true); context mode
sorts descending by the re-score u.  The mean rank fraction counts tied
false candidates as ranked above a true one, so degenerate constant scorers
cannot look good by accident.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .context import ContextStats, rescore
from .image import class_mean
from .ioutil import write_json
from .models import KgModel, score_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LinkQuery:
    """One vector plus the candidate links to rank for it.

    `truth` must be a subset of `candidates`; `class_label` groups queries
    for per-class evaluation and is None for bare entity queries.
    """

    query_id: str
    vector: np.ndarray
    candidates: tuple[tuple[int, int], ...]
    truth: frozenset[tuple[int, int]]
    class_label: str | None = None

    def __post_init__(self):
        if len(self.candidates) == 0:
            raise ValueError(f"query {self.query_id!r}: empty candidate list")
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError(f"query {self.query_id!r}: duplicate candidates")
        if not self.truth <= set(self.candidates):
            raise ValueError(f"query {self.query_id!r}: truth not within candidates")


@dataclass(frozen=True)
class RankedCandidate:
    relation: int
    entity: int
    raw_score: float
    u_score: float | None
    is_true: bool


@dataclass
class RankingReport:
    rankings: list[tuple[str, list[RankedCandidate]]]
    mu_r: float
    t_at_n_value: float
    f_at_n_value: float
    n: int
    mode: str  # "per_image" | "per_class"


def rank_links(
    model: KgModel, query: LinkQuery, context: ContextStats | None = None
) -> list[RankedCandidate]:
    """Deterministically sorted candidates (a permutation of the input).

    Without context: ascending raw score, ties by candidate index.  With
    context: descending u, ties by ascending raw score, then index.
    """
    vec = np.asarray(query.vector, dtype=float)
    rels = np.array([c[0] for c in query.candidates], dtype=int)
    ents = np.array([c[1] for c in query.candidates], dtype=int)
    if rels.min() < 0 or rels.max() >= len(model.relations):
        raise ValueError(f"query {query.query_id!r}: relation id out of range")
    if ents.min() < 0 or ents.max() >= len(model.entities):
        raise ValueError(f"query {query.query_id!r}: entity id out of range")

    raw = np.empty(len(query.candidates))
    H = np.broadcast_to(vec, (len(query.candidates), vec.shape[0]))
    for r in np.unique(rels):
        mask = rels == r
        raw[mask] = score_batch(model, H[mask], int(r), model.entity_vecs[ents[mask]])

    if context is None:
        order = np.argsort(raw, kind="stable")
        u_values: list[float | None] = [None] * len(raw)
    else:
        u_values = [
            rescore(context, float(raw[i]), int(rels[i]), int(ents[i]))
            for i in range(len(raw))
        ]
        order = sorted(range(len(raw)), key=lambda i: (-u_values[i], raw[i], i))

    truth = query.truth
    return [
        RankedCandidate(
            relation=int(rels[i]),
            entity=int(ents[i]),
            raw_score=float(raw[i]),
            u_score=u_values[i],
            is_true=(int(rels[i]), int(ents[i])) in truth,
        )
        for i in order
    ]


def _uses_context(ranking: Sequence[RankedCandidate]) -> bool:
    return ranking[0].u_score is not None


def mean_rank_fraction(reports: Sequence[Sequence[RankedCandidate]]) -> float:
    """Mean over all true candidates of (#false ranked above) / (#false).

    A false candidate with an equal effective score counts as above.  Every
    query needs at least one true and one false candidate.
    """
    fractions: list[float] = []
    for ranking in reports:
        true_items = [c for c in ranking if c.is_true]
        false_items = [c for c in ranking if not c.is_true]
        if not false_items:
            raise ValueError("query has no false candidates")
        if not true_items:
            raise ValueError("query has no true candidates")
        if _uses_context(ranking):
            false_scores = np.array([c.u_score for c in false_items])
            for c in true_items:
                above = int(np.sum(false_scores >= c.u_score))
                fractions.append(above / len(false_items))
        else:
            false_scores = np.array([c.raw_score for c in false_items])
            for c in true_items:
                above = int(np.sum(false_scores <= c.raw_score))
                fractions.append(above / len(false_items))
    # fsum is correctly rounded, so the result is iteration-order independent
    return math.fsum(fractions) / len(fractions)


def t_at_n(reports: Sequence[Sequence[RankedCandidate]], n: int) -> float:
    """Mean number of true candidates in each query's top n."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return float(np.mean([sum(c.is_true for c in r[:n]) for r in reports]))


def f_at_n(reports: Sequence[Sequence[RankedCandidate]], n: int) -> float:
    """Fraction of queries with at least one true candidate in the top n."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return float(np.mean([any(c.is_true for c in r[:n]) for r in reports]))


def evaluate_dataset(
    model: KgModel,
    queries: Sequence[LinkQuery],
    context: ContextStats | None = None,
    n: int = 3,
    per_class: bool = False,
) -> RankingReport:
    """Rank every query and aggregate the three metrics.

    Per-class mode groups queries by class label, collapses each group to its
    normalized mean vector and ranks once per class; unlabeled (`?`/None)
    queries are dropped from that mode.
    """
    if per_class:
        queries = collapse_to_class_means(queries)
    rankings: list[tuple[str, list[RankedCandidate]]] = []
    for q in queries:
        rankings.append((q.query_id, rank_links(model, q, context)))
    ranked_lists = [r for _, r in rankings]
    return RankingReport(
        rankings=rankings,
        mu_r=mean_rank_fraction(ranked_lists),
        t_at_n_value=t_at_n(ranked_lists, n),
        f_at_n_value=f_at_n(ranked_lists, n),
        n=n,
        mode="per_class" if per_class else "per_image",
    )


def collapse_to_class_means(queries: Sequence[LinkQuery]) -> list[LinkQuery]:
    """One query per class: normalized mean vector, first query's links."""
    groups: dict[str, list[LinkQuery]] = {}
    dropped = 0
    for q in queries:
        if q.class_label is None or q.class_label == "?":
            dropped += 1
            continue
        groups.setdefault(q.class_label, []).append(q)
    if dropped:
        log.warning("per-class mode dropped %d unlabeled queries", dropped)
    collapsed = []
    for label, members in groups.items():
        collapsed.append(
            LinkQuery(
                query_id=label,
                vector=class_mean([m.vector for m in members]),
                candidates=members[0].candidates,
                truth=members[0].truth,
                class_label=label,
            )
        )
    return collapsed


def pca_project(
    vectors: Sequence[np.ndarray], components: int
) -> tuple[np.ndarray, np.ndarray]:
    """Project onto the top principal components of the covariance.

    Returns (coordinates (n, components), explained-variance fractions).
    Component signs are fixed by making each component's largest-magnitude
    loading positive.  All-identical input yields zero everything.
    """
    X = np.asarray(vectors, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least 2 vectors")
    if not 1 <= components <= X.shape[1]:
        raise ValueError(f"components must be in [1, {X.shape[1]}], got {components}")
    X = X - X.mean(axis=0)
    cov = (X.T @ X) / (X.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = np.clip(eigvals[::-1], 0.0, None)
    eigvecs = eigvecs[:, ::-1]
    total = float(eigvals.sum())
    W = eigvecs[:, :components].copy()
    for j in range(components):
        pivot = int(np.argmax(np.abs(W[:, j])))
        if W[pivot, j] < 0:
            W[:, j] = -W[:, j]
    if total <= 0.0:
        return np.zeros((X.shape[0], components)), np.zeros(components)
    coords = X @ W
    explained = eigvals[:components] / total
    return coords, explained


def write_report_csv(report: RankingReport, model: KgModel, path: str | Path) -> None:
    """CSV rows: query_id,rank,relation,entity,raw_score,u_score,is_true."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["query_id", "rank", "relation", "entity", "raw_score", "u_score", "is_true"]
        )
        for query_id, ranking in report.rankings:
            for rank, c in enumerate(ranking, start=1):
                writer.writerow(
                    [
                        query_id,
                        rank,
                        model.relations.labels[c.relation],
                        model.entities.labels[c.entity],
                        repr(c.raw_score),
                        "" if c.u_score is None else repr(c.u_score),
                        int(c.is_true),
                    ]
                )


def write_summary_json(report: RankingReport, path: str | Path) -> None:
    write_json(
        path,
        {
            "mu_r": report.mu_r,
            "t_at_n": report.t_at_n_value,
            "f_at_n": report.f_at_n_value,
            "n": report.n,
            "mode": report.mode,
        },
    )


def write_projection_csv(
    ids: Sequence[str], coords: np.ndarray, explained: np.ndarray, path: str | Path
) -> None:
    """CSV `id,pc1,...` with the explained-variance fractions as a comment."""
    if len(ids) != coords.shape[0]:
        raise ValueError("ids and coordinate rows misaligned")
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fractions = ",".join(repr(float(v)) for v in explained)
        fh.write(f"# explained_variance={fractions}\n")
        fh.write("id," + ",".join(f"pc{j + 1}" for j in range(coords.shape[1])) + "\n")
        for i, name in enumerate(ids):
            row = ",".join(repr(float(v)) for v in coords[i])
            fh.write(f"{name},{row}\n")
