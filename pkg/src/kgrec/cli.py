"""Command-line pipeline: generate, expand, split, train, fit, evaluate.

Exit codes: 0 success, 1 usage error, 2 data error.  Every subcommand writes
a `<out>.manifest.json` echoing its fully resolved configuration, and all
randomness flows from the subcommand's --seed (fixed per-stage offsets).
"""

from __future__ import annotations

import argparse
import os
import sys

# Honor the thread cap before any BLAS-backed import happens.
_threads = os.environ.get("KGREC_THREADS")
if _threads:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, _threads)

from pathlib import Path

import numpy as np

from . import context as ctx_mod
from . import evaluation as eval_mod
from . import graph, image, models, training
from .ioutil import SchemaError, write_json

# Sub-seed offsets per pipeline stage (combined with --seed).
_SEED_HOLDOUT = 10
_SEED_CONTEXT = 3
_SEED_SIMULATE = 4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; usage errors are 1
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(
        prog="kgrec",
        description=(
            "Knowledge-graph embedding toolkit: triple-set preparation, "
            "TransE/NTL/SNTL training, image-vector mapping, context "
            "re-scoring and ranking evaluation. Set KGREC_THREADS to cap "
            "internal parallelism."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="generate a toy taxonomy triple TSV")
    p.add_argument("--branching", type=int, default=3)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--meronyms", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("expand", help="transitively expand listed relations")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument(
        "--relations",
        default=",".join(graph.DEFAULT_TRANSITIVE_RELATIONS),
        help="comma-separated relation labels to expand",
    )
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--out", required=True)

    p = sub.add_parser("split", help="split into train/standard/hard test sets")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--holdout-file", help="file with one held-out entity label per line")
    p.add_argument("--holdout-count", type=int, default=0,
                   help="hold out this many random entities instead")
    p.add_argument("--test-fraction", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-kg", help="train a graph embedding model")
    p.add_argument("--train", required=True, help="training triple TSV")
    p.add_argument("--variant", choices=models.VARIANTS, default="sntl")
    p.add_argument("--d", type=int, default=60)
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--s", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=10000)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--optimizer", choices=("gd", "rmsprop"), default="gd")
    p.add_argument("--freeze-u", action="store_true",
                   help="sum slices instead of training the combination vector")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="write per-epoch loss CSV here")

    p = sub.add_parser("train-img", help="train the feature-to-semantic-space map")
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True, help="graph model supplying target vectors")
    p.add_argument("--hidden", default="256", help="comma-separated hidden widths")
    p.add_argument("--dropout", type=float, default=0.3)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="write per-epoch loss CSV here")

    p = sub.add_parser("fit-context", help="fit attention and score Gaussians")
    p.add_argument("--model", required=True)
    p.add_argument("--train", required=True, help="training triple TSV")
    p.add_argument("--false-samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="rank and score queries against truth")
    p.add_argument("--model", required=True)
    p.add_argument("--queries", required=True,
                   help="feature file, or triple TSV of test triples")
    p.add_argument("--embedder", help="embedder checkpoint for raw features")
    p.add_argument("--truth", help="triple TSV giving image-label truth (feature mode)")
    p.add_argument("--known", help="triple TSV of known-true links dropped from candidates")
    p.add_argument("--context", help="context stats JSON enabling re-scoring")
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--per-class", action="store_true")
    p.add_argument("--restrict-candidates", action="store_true",
                   help="only rank (relation, tail) pairs observed in the known/truth store")
    p.add_argument("--out", required=True, help="output prefix (.csv / .summary.json)")

    p = sub.add_parser("predict", help="rank links for feature vectors (incl. '?')")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--embedder")
    p.add_argument("--context")
    p.add_argument("--per-class", action="store_true")
    p.add_argument("--top", type=int, default=0, help="rows per query (0 = all)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("project", help="export a 2-D PCA of semantic vectors")
    p.add_argument("--model", required=True)
    p.add_argument("--features", help="also project these embedded image vectors")
    p.add_argument("--embedder")
    p.add_argument("--components", type=int, default=2)
    p.add_argument("--out", required=True)

    return parser


def _write_manifest(args: argparse.Namespace, out: str) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
    write_json(Path(str(out) + ".manifest.json"), {"command": args.command, "config": config})


def _cmd_gen_toy(args) -> int:
    store = graph.gen_toy_graph(args.branching, args.depth, args.meronyms, args.seed)
    graph.save_triples(store, args.out)
    _write_manifest(args, args.out)
    print(f"wrote {len(store)} triples, {len(store.entities)} entities -> {args.out}")
    return 0


def _cmd_expand(args) -> int:
    store = graph.load_triples(args.input)
    labels = [s for s in args.relations.split(",") if s]
    rel_ids = []
    for label in labels:
        if label not in store.relations:
            raise SchemaError(f"relation {label!r} not present in {args.input}")
        rel_ids.append(store.relations.id(label))
    expanded = graph.transitive_expand(store, rel_ids, args.depth)
    graph.save_triples(expanded, args.out)
    _write_manifest(args, args.out)
    print(f"expanded {len(store)} -> {len(expanded)} triples -> {args.out}")
    return 0


def _cmd_split(args) -> int:
    store = graph.load_triples(args.input)
    if args.holdout_file and args.holdout_count:
        raise _UsageError("give either --holdout-file or --holdout-count, not both")
    holdout: list[int] = []
    if args.holdout_file:
        for line in Path(args.holdout_file).read_text(encoding="utf-8").splitlines():
            label = line.strip()
            if not label or label.startswith("#"):
                continue
            if label not in store.entities:
                raise SchemaError(f"holdout entity {label!r} not in {args.input}")
            holdout.append(store.entities.id(label))
    elif args.holdout_count:
        rng = np.random.default_rng([args.seed, _SEED_HOLDOUT])
        holdout = sorted(
            int(i) for i in rng.choice(len(store.entities), size=args.holdout_count,
                                       replace=False)
        )
    splits = graph.make_splits(store, holdout, args.test_fraction, args.seed)
    graph.write_splits(splits, args.out_dir)
    _write_manifest(args, str(Path(args.out_dir) / "run"))
    print(
        f"train={len(splits.train)} standard_test={len(splits.standard_test)} "
        f"hard_test={len(splits.hard_test)} -> {args.out_dir}"
    )
    return 0


def _cmd_train_kg(args) -> int:
    store = graph.load_triples(args.train)
    config = models.ModelConfig(
        d=args.d,
        k=args.k,
        gamma=args.gamma,
        alpha=args.alpha,
        s=args.s,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        optimizer=args.optimizer,
        seed=args.seed,
        train_u=not args.freeze_u,
    )
    model = models.init_model(
        config,
        len(store.entities),
        store.relations.labels,
        variant=args.variant,
        entity_labels=store.entities.labels,
    )
    trained, report = training.train(model, store, config)
    models.save_model(trained, args.out)
    if args.report:
        report.save_csv(args.report)
    _write_manifest(args, args.out)
    print(
        f"{args.variant}: loss {report.epoch_losses[0]:.4f} -> "
        f"{report.epoch_losses[-1]:.4f} over {config.epochs} epochs -> {args.out}"
    )
    return 0


def _cmd_train_img(args) -> int:
    model = models.load_model(args.model)
    records, dim = image.read_features(args.features)
    data = []
    skipped = 0
    for rec in records:
        if rec.label == image.UNLABELED or rec.label not in model.entities:
            skipped += 1
            continue
        data.append(image.LabeledFeature(rec.image_id, model.entities.id(rec.label), rec.vector))
    if skipped:
        print(f"skipped {skipped} records without a model entity", file=sys.stderr)
    if not data:
        raise SchemaError(f"{args.features}: no records usable as training data")
    hidden = tuple(int(h) for h in args.hidden.split(",") if h)
    config = image.EmbedderConfig(
        hidden=hidden,
        dropout_rate=args.dropout,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        seed=args.seed,
    )
    embedder, losses = image.train_embedder(data, model.entity_vecs, config)
    image.save_embedder(embedder, args.out)
    if args.report:
        training.TrainReport("image", losses).save_csv(args.report)
    _write_manifest(args, args.out)
    print(f"image map: loss {losses[0]:.5f} -> {losses[-1]:.5f} -> {args.out}")
    return 0


def _cmd_fit_context(args) -> int:
    model = models.load_model(args.model)
    store = graph.load_triples(args.train)
    _check_store_matches_model(store, model, args.train)
    store = _rebind_store(store, model)
    rng = np.random.default_rng([args.seed, _SEED_CONTEXT])
    stats = ctx_mod.fit_context(model, store, args.false_samples, rng)
    ctx_mod.save_context(stats, model, args.out)
    _write_manifest(args, args.out)
    print(
        f"context: mu_true={stats.mu_true:.4f} mu_false={stats.mu_false:.4f} "
        f"attention pairs={len(stats.attention)} -> {args.out}"
    )
    return 0


def _check_store_matches_model(store: graph.TripleStore, model: models.KgModel,
                               path: str) -> None:
    missing_e = [l for l in store.entities.labels if l not in model.entities]
    missing_r = [l for l in store.relations.labels if l not in model.relations]
    if missing_e or missing_r:
        raise SchemaError(
            f"{path}: {len(missing_e)} entities / {len(missing_r)} relations "
            f"unknown to the model"
        )


def _rebind_store(store: graph.TripleStore, model: models.KgModel) -> graph.TripleStore:
    """Re-encode a store in the model's id spaces (labels must be known)."""
    return graph.TripleStore.from_label_triples(
        store.label_triples(),
        entities=graph.Vocab(model.entities.labels),
        relations=graph.Vocab(model.relations.labels),
    )


def _is_feature_file(path: str) -> bool:
    with open(path, encoding="utf-8") as fh:
        return fh.readline().startswith(f"#{image.FEATURES_FORMAT}")


def _all_candidate_pairs(model: models.KgModel) -> tuple[tuple[int, int], ...]:
    n_e = len(model.entities)
    return tuple(
        (r, e) for r in range(len(model.relations)) for e in range(n_e)
    )


def _restricted_pairs(store: graph.TripleStore, model: models.KgModel) -> set[tuple[int, int]]:
    pairs = set()
    for t in store.triples:
        r_label = store.relations.labels[t.relation]
        e_label = store.entities.labels[t.tail]
        if r_label in model.relations and e_label in model.entities:
            pairs.add((model.relations.id(r_label), model.entities.id(e_label)))
    return pairs


def _queries_from_triples(model, test_store, known_store, restrict):
    """One query per test head: entity-row vector, test links as truth."""
    truth_by_head: dict[int, set[tuple[int, int]]] = {}
    skipped = 0
    for h, r, t in test_store.label_triples():
        if h not in model.entities or t not in model.entities or r not in model.relations:
            skipped += 1
            continue
        truth_by_head.setdefault(model.entities.id(h), set()).add(
            (model.relations.id(r), model.entities.id(t))
        )
    if skipped:
        print(f"skipped {skipped} test triples with labels unknown to the model",
              file=sys.stderr)

    known_by_head: dict[int, set[tuple[int, int]]] = {}
    restricted: set[tuple[int, int]] | None = None
    if known_store is not None:
        for h, r, t in known_store.label_triples():
            if h in model.entities and t in model.entities and r in model.relations:
                known_by_head.setdefault(model.entities.id(h), set()).add(
                    (model.relations.id(r), model.entities.id(t))
                )
        if restrict:
            restricted = _restricted_pairs(known_store, model)

    all_pairs = _all_candidate_pairs(model)
    queries = []
    for head in sorted(truth_by_head):
        truth = truth_by_head[head]
        drop = known_by_head.get(head, set()) - truth
        pairs = [p for p in all_pairs if p not in drop]
        if restricted is not None:
            pairs = [p for p in pairs if p in restricted or p in truth]
        queries.append(
            eval_mod.LinkQuery(
                query_id=model.entities.labels[head],
                vector=model.entity_vecs[head],
                candidates=tuple(pairs),
                truth=frozenset(truth),
            )
        )
    return queries


def _vectors_for_records(records, dim, model, embedder_path):
    if embedder_path:
        embedder = image.load_embedder(embedder_path)
        if embedder.dims[0] != dim:
            raise SchemaError(
                f"embedder expects dimension {embedder.dims[0]}, features have {dim}"
            )
        X = np.stack([rec.vector for rec in records])
        return image.embed_batch(embedder, X)
    if dim != model.config.d:
        raise SchemaError(
            f"features have dimension {dim} but the model space is "
            f"{model.config.d}; pass --embedder"
        )
    return np.stack([rec.vector for rec in records])


def _queries_from_features(model, records, vectors, truth_store, known_store, restrict):
    """One query per labeled image; truth = truth-store links of its label."""
    truth_by_label: dict[str, set[tuple[int, int]]] = {}
    for h, r, t in truth_store.label_triples():
        if t in model.entities and r in model.relations:
            truth_by_label.setdefault(h, set()).add(
                (model.relations.id(r), model.entities.id(t))
            )

    restricted: set[tuple[int, int]] | None = None
    if restrict:
        restricted = _restricted_pairs(known_store or truth_store, model)

    all_pairs = _all_candidate_pairs(model)
    queries = []
    skipped_unlabeled = 0
    skipped_truthless = 0
    for i, rec in enumerate(records):
        if rec.label == image.UNLABELED:
            skipped_unlabeled += 1
            continue
        truth = truth_by_label.get(rec.label, set())
        if not truth:
            skipped_truthless += 1
            continue
        pairs = all_pairs
        if restricted is not None:
            pairs = tuple(p for p in all_pairs if p in restricted or p in truth)
        queries.append(
            eval_mod.LinkQuery(
                query_id=rec.image_id,
                vector=vectors[i],
                candidates=pairs,
                truth=frozenset(truth),
                class_label=rec.label,
            )
        )
    if skipped_unlabeled:
        print(f"skipped {skipped_unlabeled} '?' records (use predict for those)",
              file=sys.stderr)
    if skipped_truthless:
        print(f"skipped {skipped_truthless} records whose label has no truth links",
              file=sys.stderr)
    return queries


def _cmd_eval(args) -> int:
    model = models.load_model(args.model)
    context = ctx_mod.load_context(args.context, model) if args.context else None
    known_store = graph.load_triples(args.known) if args.known else None

    if _is_feature_file(args.queries):
        if not args.truth:
            raise _UsageError("feature-file queries need --truth")
        records, dim = image.read_features(args.queries)
        vectors = _vectors_for_records(records, dim, model, args.embedder)
        truth_store = graph.load_triples(args.truth)
        queries = _queries_from_features(
            model, records, vectors, truth_store, known_store, args.restrict_candidates
        )
    else:
        test_store = graph.load_triples(args.queries)
        queries = _queries_from_triples(
            model, test_store, known_store, args.restrict_candidates
        )
    if not queries:
        raise SchemaError(f"{args.queries}: no usable queries")

    report = eval_mod.evaluate_dataset(
        model, queries, context=context, n=args.n, per_class=args.per_class
    )
    eval_mod.write_report_csv(report, model, args.out + ".csv")
    eval_mod.write_summary_json(report, args.out + ".summary.json")
    _write_manifest(args, args.out)
    print(
        f"mu_r={report.mu_r:.4f} t@{args.n}={report.t_at_n_value:.4f} "
        f"f@{args.n}={report.f_at_n_value:.4f} ({report.mode}, {len(report.rankings)} queries)"
    )
    return 0


def _cmd_predict(args) -> int:
    model = models.load_model(args.model)
    context = ctx_mod.load_context(args.context, model) if args.context else None
    records, dim = image.read_features(args.features)
    if not records:
        raise SchemaError(f"{args.features}: no records")
    vectors = _vectors_for_records(records, dim, model, args.embedder)

    all_pairs = _all_candidate_pairs(model)
    queries = []
    for i, rec in enumerate(records):
        queries.append(
            eval_mod.LinkQuery(
                query_id=rec.image_id,
                vector=vectors[i],
                candidates=all_pairs,
                truth=frozenset(),
                class_label=rec.label,
            )
        )
    if args.per_class:
        # '?' records stay individual queries; labeled classes collapse.
        labeled = [q for q in queries if q.class_label != image.UNLABELED]
        unlabeled = [q for q in queries if q.class_label == image.UNLABELED]
        queries = eval_mod.collapse_to_class_means(labeled) + unlabeled

    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("query_id,rank,relation,entity,raw_score,u_score,is_true\n")
        for q in queries:
            ranking = eval_mod.rank_links(model, q, context)
            if args.top:
                ranking = ranking[: args.top]
            for rank, c in enumerate(ranking, start=1):
                u = "" if c.u_score is None else repr(c.u_score)
                fh.write(
                    f"{q.query_id},{rank},{model.relations.labels[c.relation]},"
                    f"{model.entities.labels[c.entity]},{c.raw_score!r},{u},\n"
                )
    _write_manifest(args, args.out)
    print(f"ranked {len(queries)} queries -> {args.out}")
    return 0


def _cmd_project(args) -> int:
    model = models.load_model(args.model)
    ids = list(model.entities.labels)
    vectors = [model.entity_vecs[i] for i in range(len(ids))]
    if args.features:
        records, dim = image.read_features(args.features)
        image_vecs = _vectors_for_records(records, dim, model, args.embedder)
        for rec, vec in zip(records, image_vecs):
            ids.append(f"img:{rec.image_id}")
            vectors.append(vec)
    coords, explained = eval_mod.pca_project(vectors, args.components)
    eval_mod.write_projection_csv(ids, coords, explained, args.out)
    _write_manifest(args, args.out)
    print(
        f"projected {len(ids)} vectors; explained variance "
        f"{[round(float(v), 4) for v in explained]} -> {args.out}"
    )
    return 0


_COMMANDS = {
    "gen-toy": _cmd_gen_toy,
    "expand": _cmd_expand,
    "split": _cmd_split,
    "train-kg": _cmd_train_kg,
    "train-img": _cmd_train_img,
    "fit-context": _cmd_fit_context,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "project": _cmd_project,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"input file not found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except SchemaError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, RuntimeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
