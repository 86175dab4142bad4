"""Triple stores: loading, toy generation, transitive expansion, splits, negatives.

Entities and relations live in per-store vocabularies mapping labels to dense
contiguous ids, so ids double as row indices into embedding tables.
"""

from __future__ import annotations

import logging
from collections import defaultdict, deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .ioutil import write_json

log = logging.getLogger(__name__)

SPLITS_FORMAT = "kgrec-splits-v1"

# Relations expanded by default: taxonomy and part structure compose along
# paths; member relations do not.
DEFAULT_TRANSITIVE_RELATIONS = (
    "hypernym",
    "hyponym",
    "part_meronym",
    "part_holonym",
)


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class Vocab:
    """Bijection between labels and dense ids, in first-appearance order."""

    __slots__ = ("labels", "_index")

    def __init__(self, labels: Iterable[str] = ()):
        self.labels: list[str] = []
        self._index: dict[str, int] = {}
        for label in labels:
            self.add(label)

    def add(self, label: str) -> int:
        idx = self._index.get(label)
        if idx is None:
            idx = len(self.labels)
            self._index[label] = idx
            self.labels.append(label)
        return idx

    def id(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise KeyError(f"unknown label: {label!r}") from None

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.labels == other.labels


class TripleStore:
    """Immutable set of triples plus the vocabularies they index into.

    Triples keep insertion order (deterministic output) and are deduplicated;
    membership tests are exact over the stored set.
    """

    def __init__(self, entities: Vocab, relations: Vocab, triples: Iterable[Triple]):
        self.entities = entities
        self.relations = relations
        seen: set[Triple] = set()
        ordered: list[Triple] = []
        for t in triples:
            t = Triple(*t)
            if t not in seen:
                seen.add(t)
                ordered.append(t)
        self.triples: tuple[Triple, ...] = tuple(ordered)
        self._triple_set = frozenset(seen)

    @classmethod
    def from_label_triples(
        cls,
        label_triples: Iterable[tuple[str, str, str]],
        entities: Vocab | None = None,
        relations: Vocab | None = None,
    ) -> "TripleStore":
        entities = entities if entities is not None else Vocab()
        relations = relations if relations is not None else Vocab()
        triples = []
        for h, r, t in label_triples:
            triples.append(Triple(entities.add(h), relations.add(r), entities.add(t)))
        return cls(entities, relations, triples)

    def contains(self, head: int, relation: int, tail: int) -> bool:
        return Triple(head, relation, tail) in self._triple_set

    def __len__(self) -> int:
        return len(self.triples)

    def label_triple(self, t: Triple) -> tuple[str, str, str]:
        return (
            self.entities.labels[t.head],
            self.relations.labels[t.relation],
            self.entities.labels[t.tail],
        )

    def label_triples(self) -> list[tuple[str, str, str]]:
        return [self.label_triple(t) for t in self.triples]


def load_triples(path: str | Path) -> TripleStore:
    """Load a UTF-8 triple TSV: `head<TAB>relation<TAB>tail` per line.

    Lines starting with `#` and blank lines are ignored.  Vocabularies are
    built in first-appearance order; duplicate triples are dropped with one
    counted warning.  A malformed line raises ValueError naming the line.
    """
    path = Path(path)
    entities = Vocab()
    relations = Vocab()
    triples: list[Triple] = []
    seen: set[Triple] = set()
    duplicates = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3 or any(f == "" for f in fields):
                raise ValueError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}"
                )
            h, r, t = fields
            triple = Triple(entities.add(h), relations.add(r), entities.add(t))
            if triple in seen:
                duplicates += 1
            else:
                seen.add(triple)
                triples.append(triple)
    if duplicates:
        log.warning("%s: dropped %d duplicate triple(s)", path, duplicates)
    return TripleStore(entities, relations, triples)


def save_triples(store: TripleStore, path: str | Path) -> None:
    """Write the store as a triple TSV (LF line endings, store order)."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for h, r, t in store.label_triples():
            fh.write(f"{h}\t{r}\t{t}\n")


def transitive_expand(
    store: TripleStore, transitive_relations: Iterable[int], max_depth: int
) -> TripleStore:
    """Close each listed relation over directed paths of length <= max_depth.

    Paths use edges of a single relation only; no cross-relation composition.
    Returns a new store: all input triples plus (a, r, z) whenever an r-path
    a -> ... -> z of length <= max_depth exists in the input.
    """
    if max_depth < 1:
        raise ValueError(f"max_depth must be >= 1, got {max_depth}")
    rel_ids = sorted(set(transitive_relations))
    for r in rel_ids:
        if not 0 <= r < len(store.relations):
            raise ValueError(f"relation id {r} not in vocabulary")

    added: list[Triple] = []
    for r in rel_ids:
        adjacency: dict[int, list[int]] = defaultdict(list)
        for t in store.triples:
            if t.relation == r:
                adjacency[t.head].append(t.tail)
        for source in sorted(adjacency):
            reached = _bounded_reachable(source, adjacency, max_depth)
            for target in sorted(reached):
                if not store.contains(source, r, target):
                    added.append(Triple(source, r, target))

    return TripleStore(store.entities, store.relations, list(store.triples) + added)


def _bounded_reachable(source: int, adjacency: dict[int, list[int]], max_depth: int) -> set[int]:
    """Nodes reachable from `source` by 1..max_depth edges (BFS levels)."""
    reached: set[int] = set()
    frontier = deque([(source, 0)])
    best_depth = {source: 0}
    while frontier:
        node, depth = frontier.popleft()
        if depth == max_depth:
            continue
        for nxt in adjacency.get(node, ()):
            if nxt not in best_depth or best_depth[nxt] > depth + 1:
                best_depth[nxt] = depth + 1
                frontier.append((nxt, depth + 1))
            reached.add(nxt)
    return reached


@dataclass
class DatasetSplits:
    """Three disjoint splits of one triple set.

    `train` is a fresh store whose entity vocabulary excludes the holdout
    entities; `standard_test` and `hard_test` are label triples so they stay
    meaningful across vocabularies.
    """

    train: TripleStore
    standard_test: tuple[tuple[str, str, str], ...]
    hard_test: tuple[tuple[str, str, str], ...]
    holdout_labels: tuple[str, ...]
    seed: int
    test_fraction: float


def make_splits(
    store: TripleStore,
    holdout_entities: Iterable[int],
    test_fraction: float,
    seed: int,
) -> DatasetSplits:
    """Split into train / standard test / hard test.

    Every triple touching a holdout entity goes to hard_test.  The rest is
    partitioned at random (seeded) with |standard_test| = round(fraction *
    remaining), then repaired so each standard-test triple only uses entities
    that still appear in some train triple.
    """
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError(f"test_fraction must be in [0, 1], got {test_fraction}")
    holdout = set(holdout_entities)
    for e in holdout:
        if not 0 <= e < len(store.entities):
            raise ValueError(f"holdout entity id {e} not in vocabulary")

    hard: list[Triple] = []
    remaining: list[Triple] = []
    for t in store.triples:
        if t.head in holdout or t.tail in holdout:
            hard.append(t)
        else:
            remaining.append(t)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(remaining))
    shuffled = [remaining[i] for i in order]
    n_test = int(round(test_fraction * len(remaining)))
    test = shuffled[:n_test]
    train = shuffled[n_test:]

    test, train = _repair_entity_coverage(test, train)

    holdout_labels = tuple(
        label for i, label in enumerate(store.entities.labels) if i in holdout
    )
    keep_entities = Vocab(
        label for i, label in enumerate(store.entities.labels) if i not in holdout
    )
    train_store = TripleStore.from_label_triples(
        (store.label_triple(t) for t in train),
        entities=keep_entities,
        relations=Vocab(store.relations.labels),
    )
    return DatasetSplits(
        train=train_store,
        standard_test=tuple(store.label_triple(t) for t in test),
        hard_test=tuple(store.label_triple(t) for t in hard),
        holdout_labels=holdout_labels,
        seed=seed,
        test_fraction=test_fraction,
    )


def _repair_entity_coverage(
    test: list[Triple], train: list[Triple]
) -> tuple[list[Triple], list[Triple]]:
    """Ensure every test-triple entity appears in >= 1 train triple.

    Violating test triples move to train; the count is refilled with train
    triples whose entities all stay covered after removal.  When no such
    triple exists the test set is left short (invariants beat exact size).
    """
    coverage: dict[int, int] = defaultdict(int)
    for t in train:
        for e in {t.head, t.tail}:
            coverage[e] += 1

    kept_test: list[Triple] = []
    deficit = 0
    for t in test:
        if coverage[t.head] == 0 or coverage[t.tail] == 0:
            train.append(t)
            for e in {t.head, t.tail}:
                coverage[e] += 1
            deficit += 1
        else:
            kept_test.append(t)

    if deficit:
        moved: set[int] = set()
        for i, t in enumerate(train):
            if len(moved) == deficit:
                break
            if all(coverage[e] >= 2 for e in {t.head, t.tail}):
                for e in {t.head, t.tail}:
                    coverage[e] -= 1
                kept_test.append(t)
                moved.add(i)
        train = [t for i, t in enumerate(train) if i not in moved]
        if len(moved) < deficit:
            log.warning(
                "standard test short by %d triple(s) to keep entity coverage",
                deficit - len(moved),
            )
    return kept_test, train


def write_splits(splits: DatasetSplits, out_dir: str | Path) -> None:
    """Write train/standard_test/hard_test TSVs plus the splits manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_triples(splits.train, out / "train.tsv")
    for name, rows in (
        ("standard_test.tsv", splits.standard_test),
        ("hard_test.tsv", splits.hard_test),
    ):
        with (out / name).open("w", encoding="utf-8", newline="\n") as fh:
            for h, r, t in rows:
                fh.write(f"{h}\t{r}\t{t}\n")
    write_json(
        out / "splits.json",
        {
            "format": SPLITS_FORMAT,
            "holdout": list(splits.holdout_labels),
            "seed": splits.seed,
            "test_fraction": splits.test_fraction,
        },
    )


_CORRUPT_TRIES = 64


def corrupt_tail(triple: Triple, store: TripleStore, rng: np.random.Generator) -> Triple:
    """Replace the tail with a uniform random entity yielding a non-stored triple.

    Rejection-samples over the whole vocabulary with a bounded retry, then
    falls back to enumerating valid candidates.  Raises ValueError when no
    corruption exists (every other tail makes a stored triple).
    """
    n = len(store.entities)
    h, r, t = triple
    for _ in range(_CORRUPT_TRIES):
        cand = int(rng.integers(n))
        if cand != t and not store.contains(h, r, cand):
            return Triple(h, r, cand)
    valid = [c for c in range(n) if c != t and not store.contains(h, r, c)]
    if not valid:
        raise ValueError(
            f"no valid tail corruption for triple {store.label_triple(triple)}"
        )
    return Triple(h, r, int(valid[int(rng.integers(len(valid)))]))


def gen_toy_graph(
    branching: int, depth: int, meronym_count: int, seed: int
) -> TripleStore:
    """Generate a balanced taxonomy tree plus random part edges.

    Nodes are numbered level-order; each child links to its parent with
    `hypernym` and back with `hyponym`.  `meronym_count` distinct ordered node
    pairs get a `part_meronym` edge plus the inverse `part_holonym`.
    """
    if branching < 1:
        raise ValueError(f"branching must be >= 1, got {branching}")
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if branching == 1:
        n_nodes = depth + 1
    else:
        n_nodes = (branching ** (depth + 1) - 1) // (branching - 1)
    width = max(1, len(str(n_nodes - 1)))
    labels = [f"n{i:0{width}d}" for i in range(n_nodes)]

    entities = Vocab(labels)
    relations = Vocab(["hypernym", "hyponym", "part_meronym", "part_holonym"])
    hyper, hypo, mero, holo = range(4)

    triples: list[Triple] = []
    for child in range(1, n_nodes):
        parent = (child - 1) // branching
        triples.append(Triple(child, hyper, parent))
        triples.append(Triple(parent, hypo, child))

    max_pairs = n_nodes * (n_nodes - 1)
    if meronym_count > max_pairs:
        raise ValueError(
            f"meronym_count {meronym_count} exceeds {max_pairs} distinct ordered pairs"
        )
    rng = np.random.default_rng(seed)
    pair_codes = rng.choice(max_pairs, size=meronym_count, replace=False)
    for code in pair_codes:
        a, rest = divmod(int(code), n_nodes - 1)
        b = rest if rest < a else rest + 1
        triples.append(Triple(a, mero, b))
        triples.append(Triple(b, holo, a))

    return TripleStore(entities, relations, triples)
