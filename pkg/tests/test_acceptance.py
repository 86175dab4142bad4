"""Acceptance criteria, one test per criterion, each printing a verdict line.

Run with `pytest -s tests/test_acceptance.py` to see the PASS lines.
Everything runs at desk scale, so the checks are oracle equivalences,
invariants, and directional orderings rather than absolute benchmark values.
"""

import time

import numpy as np
import pytest

from kgrec import (
    cli,
    context as ctx_mod,
    evaluation as ev,
    graph,
    image,
    models,
    training,
)
from oracles import bfs_closure, random_dag, rank_metrics

# ---------------------------------------------------------------------------
# shared toy dataset: gen-toy(branching 3, depth 4, 40 meronyms) expanded at 4
# ---------------------------------------------------------------------------

TOY_SEED = 11
TRAIN_SEEDS = (1, 2, 3)


@pytest.fixture(scope="module")
def toy():
    store = graph.gen_toy_graph(3, 4, 40, seed=TOY_SEED)
    rels = [store.relations.id(r) for r in graph.DEFAULT_TRANSITIVE_RELATIONS]
    return graph.transitive_expand(store, rels, 4)


def train_variant(store, variant, config):
    m0 = models.init_model(
        config,
        len(store.entities),
        store.relations.labels,
        variant=variant,
        entity_labels=store.entities.labels,
    )
    trained, _ = training.train(m0, store, config)
    return trained


def all_pairs(model):
    return tuple(
        (r, e) for r in range(len(model.relations)) for e in range(len(model.entities))
    )


def verdict(criterion, detail):
    print(f"\nACCEPTANCE {criterion}: PASS — {detail}")


# ---------------------------------------------------------------------------
# criterion 1: analytic gradients match central finite differences
# ---------------------------------------------------------------------------


def sample_clear_batch(model, rng, s, alpha):
    """5-triple batch whose margins stay 1e-3 away from the hinge kink for
    both objectives (finite differences break at the kink)."""
    n_e = len(model.entities)
    n_r = len(model.relations)
    for _ in range(200):
        pos, neg = [], []
        for _ in range(5):
            h, t = rng.integers(n_e, size=2)
            r = int(rng.integers(n_r))
            t2 = int(rng.integers(n_e))
            pos.append((int(h), r, int(t)))
            neg.append((int(h), r, t2))
        noise = training.draw_batch_noise(model, pos, neg, s, rng)
        clear = True
        for offsets in (None, noise):
            vecs = model.entity_vecs if offsets is None else model.entity_vecs + offsets
            f_pos = np.array([
                models.score(model, vecs[h], r, vecs[t]) for h, r, t in pos
            ])
            f_neg = np.array([
                models.score(model, vecs[h], r, vecs[t]) for h, r, t in neg
            ])
            margins = model.config.gamma + f_pos - f_neg
            if np.any(np.abs(margins) < 1e-3):
                clear = False
        if clear:
            return pos, neg, noise
    raise RuntimeError("could not sample a kink-free batch")


def max_rel_error(model, loss_fn, grads, step=1e-5):
    worst = 0.0
    for key, arr in model.parameters().items():
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            lp = loss_fn()
            arr[idx] = orig - step
            lm = loss_fn()
            arr[idx] = orig
            num = (lp - lm) / (2 * step)
            ana = grads[key][idx]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst


def test_criterion_1_gradient_correctness():
    start = time.monotonic()
    rng = np.random.default_rng(2024)
    worst_overall = 0.0
    for trial in range(20):
        d = int(rng.choice([2, 3, 4]))
        k = int(rng.choice([1, 2, 3]))
        config = models.ModelConfig(
            d=d, k=k, gamma=float(rng.uniform(0.2, 1.0)), alpha=0.6, s=0.1,
            seed=int(rng.integers(1_000_000)),
        )
        model = models.init_model(config, 8, ["r0", "r1"], variant="ntl")
        # spread parameters so gradients are not uniformly tiny
        model.entity_vecs += rng.normal(0, 0.3, size=model.entity_vecs.shape)
        pos, neg, noise = sample_clear_batch(model, rng, 0.1, 0.6)

        hinge_grads = training.loss_gradients(model, pos, neg, "hinge")
        worst = max_rel_error(
            model, lambda: training.batch_hinge_loss(model, pos, neg), hinge_grads.grads
        )
        assert worst < 1e-4, f"trial {trial}: hinge rel err {worst}"
        worst_overall = max(worst_overall, worst)

        smooth_grads = training.loss_gradients(
            model, pos, neg, "smooth", alpha=0.6, noise=noise
        )
        worst = max_rel_error(
            model,
            lambda: training.smooth_loss_given_noise(model, pos, neg, 0.6, noise),
            smooth_grads.grads,
        )
        assert worst < 1e-4, f"trial {trial}: smooth rel err {worst}"
        worst_overall = max(worst_overall, worst)
    elapsed = time.monotonic() - start
    assert elapsed < 10.0, f"gradient check took {elapsed:.1f}s"
    verdict(1, f"20 models, both objectives, max rel err {worst_overall:.2e}, "
               f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: ranking metrics equal the brute-force oracle; random baseline
# ---------------------------------------------------------------------------


def test_criterion_2_ranking_oracle_equivalence():
    rng = np.random.default_rng(77)
    rankings = []
    oracle_queries = []
    for q in range(100):
        n_cand = int(rng.integers(5, 51))
        d = 3
        config = models.ModelConfig(d=d, k=2, seed=int(rng.integers(1_000_000)))
        model = models.init_model(config, n_cand, ["r"], variant="ntl")
        model.entity_vecs += rng.normal(0, 0.5, size=model.entity_vecs.shape)
        vec = rng.normal(size=d)
        n_true = int(rng.integers(1, max(2, n_cand // 3)))
        true_ids = rng.choice(n_cand, size=n_true, replace=False)
        query = ev.LinkQuery(
            query_id=f"q{q}",
            vector=vec,
            candidates=tuple((0, e) for e in range(n_cand)),
            truth=frozenset((0, int(e)) for e in true_ids),
        )
        rankings.append(ev.rank_links(model, query))
        scores = [models.score(model, vec, 0, model.entity_vecs[e])
                  for e in range(n_cand)]
        flags = [e in set(int(x) for x in true_ids) for e in range(n_cand)]
        oracle_queries.append((scores, flags))

    mu_oracle, t3_oracle, f3_oracle = rank_metrics(oracle_queries, 3)
    assert ev.mean_rank_fraction(rankings) == mu_oracle
    assert ev.t_at_n(rankings, 3) == t3_oracle
    assert ev.f_at_n(rankings, 3) == f3_oracle

    # random-score baseline: mu_r must sit at 0.500, as random guessing must
    rng = np.random.default_rng(99)
    random_rankings = []
    n_true_total = 0
    while n_true_total < 10_000:
        scores = rng.normal(size=50)
        flags = rng.permutation(50) < 20
        n_true_total += int(flags.sum())
        order = np.argsort(scores, kind="stable")
        random_rankings.append(
            [ev.RankedCandidate(0, int(i), float(scores[i]), None, bool(flags[i]))
             for i in order]
        )
    mu_random = ev.mean_rank_fraction(random_rankings)
    assert abs(mu_random - 0.500) < 0.01
    verdict(2, f"100 queries exactly equal oracle; random baseline "
               f"mu_r={mu_random:.4f} over {n_true_total} true candidates")


# ---------------------------------------------------------------------------
# criterion 3: transitive closure equals depth-bounded BFS on random DAGs
# ---------------------------------------------------------------------------


def test_criterion_3_transitive_closure_oracle():
    rng = np.random.default_rng(31)
    checked = 0
    for _ in range(50):
        edges = random_dag(rng, max_nodes=30)
        if not edges:
            continue
        nodes = sorted({a for a, _ in edges} | {b for _, b in edges})
        labels = {v: f"v{v}" for v in nodes}
        store = graph.TripleStore.from_label_triples(
            [(labels[a], "edge", labels[b]) for a, b in sorted(edges)]
        )
        id_of = {v: store.entities.id(labels[v]) for v in nodes}
        for depth in (1, 2, 3, 4):
            out = graph.transitive_expand(store, [0], depth)
            got = {(t.head, t.tail) for t in out.triples}
            expected = {(id_of[a], id_of[b]) for a, b in bfs_closure(edges, depth)}
            assert got == expected, f"depth {depth} mismatch"
            if depth == 1:
                assert got == {(t.head, t.tail) for t in store.triples}
        checked += 1
    assert checked >= 45
    verdict(3, f"{checked} random DAGs equal BFS closure at depths 1-4; "
               f"depth 1 is the identity")


# ---------------------------------------------------------------------------
# criterion 4: smoothness ordering l(SNTL) < l(NTL) in 3 of 3 seeds
# ---------------------------------------------------------------------------

CFG4 = dict(d=16, k=3, gamma=1.0, alpha=0.5, s=0.1, epochs=200, batch_size=256,
            learning_rate=0.1, optimizer="gd")


@pytest.fixture(scope="module")
def smoothness_models(toy):
    out = {}
    for seed in TRAIN_SEEDS:
        config = models.ModelConfig(seed=seed, **CFG4)
        out[seed] = {
            "ntl": train_variant(toy, "ntl", config),
            "sntl": train_variant(toy, "sntl", config),
        }
    return out


def test_criterion_4_smoothness_ordering(toy, smoothness_models):
    start = time.monotonic()
    estimates = {}
    for seed in TRAIN_SEEDS:
        pair = {}
        for variant in ("ntl", "sntl"):
            rng = np.random.default_rng(100 + seed)  # same draws for both models
            pair[variant] = training.lipschitz_estimate(
                smoothness_models[seed][variant], toy.triples, 0.1, rng,
                samples_per_triple=2,
            )
        estimates[seed] = pair
        assert pair["sntl"] < pair["ntl"], (
            f"seed {seed}: l(SNTL)={pair['sntl']:.4f} not below l(NTL)={pair['ntl']:.4f}"
        )
    elapsed = time.monotonic() - start
    assert elapsed < 300.0
    detail = ", ".join(
        f"seed {s}: {e['sntl']:.3f}<{e['ntl']:.3f}" for s, e in estimates.items()
    )
    verdict(4, f"smoother SNTL in 3/3 seeds ({detail})")


# ---------------------------------------------------------------------------
# criterion 5: mean rank ordering SNTL <= NTL < TransE on the 2% split
# ---------------------------------------------------------------------------

CFG5 = dict(d=4, k=3, gamma=0.5, alpha=0.5, s=0.1, epochs=200, batch_size=128,
            learning_rate=0.01, optimizer="rmsprop")


def split_queries(model, splits):
    truth_by_head = {}
    for h, r, t in splits.standard_test:
        hid = model.entities.id(h)
        truth_by_head.setdefault(hid, set()).add(
            (model.relations.id(r), model.entities.id(t))
        )
    known = {}
    for h, r, t in splits.train.label_triples():
        hid = model.entities.id(h)
        known.setdefault(hid, set()).add(
            (model.relations.id(r), model.entities.id(t))
        )
    pairs = all_pairs(model)
    queries = []
    for head in sorted(truth_by_head):
        truth = truth_by_head[head]
        drop = known.get(head, set()) - truth
        queries.append(
            ev.LinkQuery(
                query_id=model.entities.labels[head],
                vector=model.entity_vecs[head],
                candidates=tuple(p for p in pairs if p not in drop),
                truth=frozenset(truth),
            )
        )
    return queries


def test_criterion_5_mean_rank_ordering(toy):
    wins = 0
    rows = []
    for seed in TRAIN_SEEDS:
        splits = graph.make_splits(toy, set(), 0.02, seed)
        mus = {}
        for variant in ("transe", "ntl", "sntl"):
            config = models.ModelConfig(seed=seed, **CFG5)
            model = train_variant(splits.train, variant, config)
            report = ev.evaluate_dataset(model, split_queries(model, splits), n=3)
            mus[variant] = report.mu_r
        ok = (
            mus["sntl"] <= mus["ntl"] < mus["transe"]
            and mus["transe"] >= 1.1 * mus["ntl"]
        )
        wins += ok
        rows.append(
            f"seed {seed}: transe={mus['transe']:.4f} ntl={mus['ntl']:.4f} "
            f"sntl={mus['sntl']:.4f} ({'ok' if ok else 'miss'})"
        )
    assert wins >= 2, "; ".join(rows)
    verdict(5, f"{wins}/3 seeds hold SNTL<=NTL<TransE(+10%): " + "; ".join(rows))


# ---------------------------------------------------------------------------
# criteria 6 & 7: context re-scoring direction on simulated held-out images
# ---------------------------------------------------------------------------

CFG6 = dict(d=6, k=3, gamma=0.5, alpha=0.5, s=0.1, epochs=100, batch_size=128,
            learning_rate=0.01, optimizer="rmsprop")
CTX_SEED = 1
IMAGES_PER_ENTITY = 20
IMAGE_NOISE = 0.1  # matches the graph-training perturbation scale


@pytest.fixture(scope="module")
def context_setup(toy):
    """Models trained on the full graph; 10 leaf-like entities act as
    held-out image classes whose vectors are simulated as g*(e) + noise."""
    trained = {}
    for variant in ("ntl", "sntl"):
        config = models.ModelConfig(seed=CTX_SEED, **CFG6)
        trained[variant] = train_variant(toy, variant, config)

    head_counts = {}
    for t in toy.triples:
        head_counts[t.head] = head_counts.get(t.head, 0) + 1
    eligible = sorted(e for e, c in head_counts.items() if 3 <= c <= 8)
    rng_pick = np.random.default_rng(42)
    held = sorted(int(x) for x in rng_pick.choice(eligible, size=10, replace=False))

    truth_by_entity = {}
    for t in toy.triples:
        if t.head in held:
            truth_by_entity.setdefault(t.head, set()).add((t.relation, t.tail))

    results = {}
    per_class_f3 = {}
    for name, model in (("intl", trained["ntl"]), ("sintl", trained["sntl"])):
        stats = ctx_mod.fit_context(
            model, toy, 2000, np.random.default_rng([CTX_SEED, 3])
        )
        pairs = all_pairs(model)
        rng_img = np.random.default_rng([CTX_SEED, 4])
        queries = []
        for e in held:
            base = model.entity_vecs[e]
            for j in range(IMAGES_PER_ENTITY):
                vec = base + rng_img.normal(0, IMAGE_NOISE, size=base.shape)
                queries.append(
                    ev.LinkQuery(
                        query_id=f"{model.entities.labels[e]}#{j}",
                        vector=vec,
                        candidates=pairs,
                        truth=frozenset(truth_by_entity[e]),
                        class_label=model.entities.labels[e],
                    )
                )
        results[name] = ev.evaluate_dataset(model, queries, n=3).f_at_n_value
        results[name + "+ctx"] = ev.evaluate_dataset(
            model, queries, context=stats, n=3
        ).f_at_n_value
        per_class_f3[name] = ev.evaluate_dataset(
            model, queries, context=stats, n=3, per_class=True
        ).f_at_n_value
    return results, per_class_f3


def test_criterion_6_context_direction(context_setup):
    f3, _ = context_setup
    assert f3["intl+ctx"] >= f3["intl"], f3
    assert f3["sintl+ctx"] >= f3["sintl"], f3
    best = max(f3.values())
    assert f3["sintl+ctx"] >= best - 1e-12, f3
    verdict(6, "f@3 " + " ".join(f"{k}={v:.3f}" for k, v in sorted(f3.items()))
               + " (context helps both; SINTL+Context best)")


def test_criterion_7_per_class_at_least_per_image(context_setup):
    f3, per_class = context_setup
    assert per_class["sintl"] >= f3["sintl+ctx"]
    verdict(7, f"per-class f@3 {per_class['sintl']:.3f} >= "
               f"per-image {f3['sintl+ctx']:.3f} for SINTL+Context")


# ---------------------------------------------------------------------------
# criterion 8: image-embedding recovery and output normalization
# ---------------------------------------------------------------------------


def test_criterion_8_image_embedding_recovery():
    rng = np.random.default_rng(800)
    d, classes = 16, 20
    targets = rng.normal(size=(classes, d))
    targets /= np.linalg.norm(targets, axis=1, keepdims=True)
    train_items, held_items = [], []
    for c in range(classes):
        for j in range(30):
            feat = targets[c] + rng.normal(0, 0.05, size=d)
            item = image.LabeledFeature(f"c{c}_{j}", c, feat)
            (train_items if j < 20 else held_items).append(item)
    config = image.EmbedderConfig(hidden=(32,), dropout_rate=0.0, epochs=150,
                                  batch_size=32, learning_rate=0.005, seed=8)
    embedder, losses = image.train_embedder(train_items, targets, config)
    assert losses[-1] < losses[0]
    cosines = [
        float(np.dot(image.embed(embedder, item.feature), targets[item.entity]))
        for item in held_items
    ]
    mean_cosine = float(np.mean(cosines))
    assert mean_cosine > 0.9

    X = rng.normal(size=(10_000, d))
    norms = np.linalg.norm(image.embed_batch(embedder, X), axis=1)
    assert np.all(np.abs(norms - 1.0) <= 1e-9)
    spot = np.linalg.norm(image.embed(embedder, X[0]))
    assert abs(spot - 1.0) <= 1e-9
    verdict(8, f"held-out cosine {mean_cosine:.3f} > 0.9; "
               f"10^4 embed outputs unit-norm within 1e-9")


# ---------------------------------------------------------------------------
# criterion 9: the full seeded pipeline is byte-identical across runs
# ---------------------------------------------------------------------------


def run_pipeline(base):
    base.mkdir()
    toy_tsv = base / "toy.tsv"
    big_tsv = base / "big.tsv"
    split_dir = base / "splits"
    model_json = base / "model.json"
    ctx_json = base / "ctx.json"
    emb_json = base / "emb.json"
    feats = base / "train.features"
    out_prefix = base / "report"

    def ok(*argv):
        assert cli.main([str(a) for a in argv]) == 0

    ok("gen-toy", "--branching", 3, "--depth", 3, "--meronyms", 10, "--seed", 5,
       "--out", toy_tsv)
    ok("expand", "--in", toy_tsv, "--depth", 4, "--out", big_tsv)
    ok("split", "--in", big_tsv, "--out-dir", split_dir, "--test-fraction", "0.05",
       "--seed", 5)
    ok("train-kg", "--train", split_dir / "train.tsv", "--variant", "sntl",
       "--d", 6, "--k", 2, "--gamma", "0.5", "--epochs", 30, "--batch-size", 128,
       "--learning-rate", "0.01", "--optimizer", "rmsprop", "--seed", 5,
       "--out", model_json)

    model = models.load_model(model_json)
    rng = np.random.default_rng(55)
    records = []
    for i, label in enumerate(model.entities.labels[:8]):
        vec = model.entity_vecs[model.entities.id(label)] + rng.normal(0, 0.05, 6)
        records.append(image.FeatureRecord(f"img{i}", label, vec))
    image.write_features(feats, records, 6)

    ok("train-img", "--features", feats, "--model", model_json, "--hidden", 8,
       "--dropout", "0.0", "--epochs", 20, "--batch-size", 8, "--seed", 5,
       "--out", emb_json)
    ok("fit-context", "--model", model_json, "--train", split_dir / "train.tsv",
       "--false-samples", 200, "--seed", 5, "--out", ctx_json)
    ok("eval", "--model", model_json, "--queries", feats, "--embedder", emb_json,
       "--truth", big_tsv, "--context", ctx_json, "--n", 3, "--out", out_prefix)
    return (base / "report.summary.json").read_bytes(), model_json.read_bytes()


def test_criterion_9_pipeline_determinism(tmp_path):
    summary1, model1 = run_pipeline(tmp_path / "run1")
    summary2, model2 = run_pipeline(tmp_path / "run2")
    assert model1 == model2, "model checkpoints differ between runs"
    assert summary1 == summary2, "summary JSON differs between runs"
    verdict(9, f"two pipeline runs byte-identical "
               f"({len(summary1)}-byte summary, {len(model1)}-byte checkpoint)")
