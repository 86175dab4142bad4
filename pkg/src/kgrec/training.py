"""Margin losses, their analytic gradients, optimizers and the train loop.

The smoothed objective mixes the plain hinge loss with the same loss
evaluated at noise-perturbed entity embeddings; one noise row is drawn per
distinct entity appearing in the batch, so the perturbed term sees a single
consistent perturbed embedding function.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import Triple, TripleStore, corrupt_tail
from .models import KgModel, ModelConfig, TranseRelation, score
from .optim import make_optimizer


IdTriple = tuple[int, int, int]

# Sub-seed offsets so one config seed drives independent streams.
_SEED_CORRUPT = 1
_SEED_NOISE = 2


@dataclass
class GradientSet:
    """Partial derivatives keyed like KgModel.parameters()."""

    grads: dict[str, np.ndarray]

    def __getitem__(self, key: str) -> np.ndarray:
        return self.grads[key]

    @property
    def entity(self) -> np.ndarray:
        return self.grads["entities"]


@dataclass
class TrainReport:
    variant: str
    epoch_losses: list[float]

    def save_csv(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            fh.write("epoch,mean_loss\n")
            for epoch, loss in enumerate(self.epoch_losses, start=1):
                fh.write(f"{epoch},{loss!r}\n")


def _check_batch(positives: Sequence[IdTriple], negatives: Sequence[IdTriple]) -> None:
    if len(positives) == 0:
        raise ValueError("empty batch")
    if len(positives) != len(negatives):
        raise ValueError(
            f"misaligned batch: {len(positives)} positives vs {len(negatives)} negatives"
        )


def batch_hinge_loss(
    model: KgModel,
    positives: Sequence[IdTriple],
    negatives: Sequence[IdTriple],
    entity_offsets: np.ndarray | None = None,
) -> float:
    """Mean hinge margin: (1/N) sum [gamma + f(pos) - f(neg)]_+ over pairs."""
    _check_batch(positives, negatives)
    loss, _ = _hinge_loss_and_grads(
        model, positives, negatives, entity_offsets=entity_offsets, want_grads=False
    )
    return loss


def perturb(vec: np.ndarray, s: float, rng: np.random.Generator) -> np.ndarray:
    """Add component-wise N(0, s^2) noise; s is a standard deviation."""
    if s < 0:
        raise ValueError(f"s must be >= 0, got {s}")
    vec = np.asarray(vec, dtype=float)
    if s == 0:
        return vec.copy()
    return vec + rng.normal(0.0, s, size=vec.shape)


def draw_batch_noise(
    model: KgModel,
    positives: Sequence[IdTriple],
    negatives: Sequence[IdTriple],
    s: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One N(0, s^2 I) offset row per distinct entity in the batch.

    Returned with the entity-table shape; untouched entities stay zero.
    """
    offsets = np.zeros_like(model.entity_vecs)
    used = sorted(
        {t[0] for t in positives}
        | {t[2] for t in positives}
        | {t[0] for t in negatives}
        | {t[2] for t in negatives}
    )
    if s > 0:
        for e in used:
            offsets[e] = rng.normal(0.0, s, size=model.entity_vecs.shape[1])
    return offsets


def smooth_loss(
    model: KgModel,
    positives: Sequence[IdTriple],
    negatives: Sequence[IdTriple],
    alpha: float,
    s: float,
    rng: np.random.Generator,
) -> float:
    """alpha * clean hinge loss + (1 - alpha) * hinge loss at perturbed embeddings."""
    _check_batch(positives, negatives)
    noise = draw_batch_noise(model, positives, negatives, s, rng)
    return smooth_loss_given_noise(model, positives, negatives, alpha, noise)


def smooth_loss_given_noise(
    model: KgModel,
    positives: Sequence[IdTriple],
    negatives: Sequence[IdTriple],
    alpha: float,
    noise: np.ndarray,
) -> float:
    """Smoothed loss with explicit noise offsets (testable recomposition)."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    clean = batch_hinge_loss(model, positives, negatives)
    perturbed = batch_hinge_loss(model, positives, negatives, entity_offsets=noise)
    return alpha * clean + (1.0 - alpha) * perturbed


def loss_gradients(
    model: KgModel,
    positives: Sequence[IdTriple],
    negatives: Sequence[IdTriple],
    objective: str = "hinge",
    alpha: float | None = None,
    s: float | None = None,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> GradientSet:
    """Exact gradient of the selected loss for every parameter the batch touches.

    Hinge-inactive pairs contribute zero (subgradient 0 at the kink).  For the
    smooth objective pass either explicit `noise` offsets or (`s`, `rng`).
    """
    _check_batch(positives, negatives)
    if objective == "hinge":
        _, grads = _hinge_loss_and_grads(model, positives, negatives)
        return GradientSet(grads)
    if objective != "smooth":
        raise ValueError(f"unknown objective: {objective!r}")
    alpha = model.config.alpha if alpha is None else alpha
    if noise is None:
        if rng is None or s is None:
            raise ValueError("smooth objective needs either noise or (s, rng)")
        noise = draw_batch_noise(model, positives, negatives, s, rng)
    _, grads = _smooth_loss_and_grads(model, positives, negatives, alpha, noise)
    return GradientSet(grads)


def _smooth_loss_and_grads(model, positives, negatives, alpha, noise):
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    clean_loss, clean = _hinge_loss_and_grads(model, positives, negatives)
    pert_loss, pert = _hinge_loss_and_grads(
        model, positives, negatives, entity_offsets=noise
    )
    grads = {
        key: alpha * clean[key] + (1.0 - alpha) * pert[key] for key in clean
    }
    return alpha * clean_loss + (1.0 - alpha) * pert_loss, grads


def _zero_grads(model: KgModel) -> dict[str, np.ndarray]:
    return {key: np.zeros_like(arr) for key, arr in model.parameters().items()}


def _hinge_loss_and_grads(
    model: KgModel,
    positives: Sequence[IdTriple],
    negatives: Sequence[IdTriple],
    entity_offsets: np.ndarray | None = None,
    want_grads: bool = True,
):
    """Score both sides, form the mean hinge, backpropagate active pairs.

    Gradients accumulate with np.add.at in ascending relation order, so the
    reduction order is fixed and runs are bit-reproducible.
    """
    n = len(positives)
    vecs = model.entity_vecs if entity_offsets is None else model.entity_vecs + entity_offsets

    pos = np.asarray(positives, dtype=int).reshape(n, 3)
    neg = np.asarray(negatives, dtype=int).reshape(n, 3)

    f_pos, cache_pos = _score_side(model, vecs, pos)
    f_neg, cache_neg = _score_side(model, vecs, neg)

    margins = model.config.gamma + f_pos - f_neg
    active = margins > 0
    loss = float(np.sum(np.where(active, margins, 0.0)) / n)
    if not np.all(np.isfinite(margins)):
        loss = float("nan")  # the hinge would silently mask NaN scores
    if not want_grads:
        return loss, None

    grads = _zero_grads(model)
    weights = active.astype(float) / n
    _accumulate_side(model, grads, vecs, pos, cache_pos, weights)
    _accumulate_side(model, grads, vecs, neg, cache_neg, -weights)
    return loss, grads


def _score_side(model: KgModel, vecs: np.ndarray, triples: np.ndarray):
    """Score an (n, 3) id-triple array; cache per-relation activations."""
    n = triples.shape[0]
    f = np.empty(n)
    cache = []
    for r in np.unique(triples[:, 1]):
        params = model.rel_params.get(int(r))
        if params is None:
            raise ValueError(f"relation id {int(r)} not in model")
        idx = np.flatnonzero(triples[:, 1] == r)
        H = vecs[triples[idx, 0]]
        T = vecs[triples[idx, 2]]
        if isinstance(params, TranseRelation):
            diff = H + params.t[None, :] - T
            norms = np.linalg.norm(diff, axis=1)
            f[idx] = norms
            cache.append((int(r), idx, diff, norms))
        else:
            z = np.einsum("nd,dek,ne->nk", H, params.W, T)
            z += np.concatenate([H, T], axis=1) @ params.V.T
            z += params.b[None, :]
            a = np.tanh(z)
            f[idx] = a @ params.u
            cache.append((int(r), idx, H, T, a))
    return f, cache


def _accumulate_side(model, grads, vecs, triples, cache, weights):
    """Add w_i * d f(triple_i)/d theta into `grads` for one batch side."""
    d = model.entity_vecs.shape[1]
    ent_grad = grads["entities"]
    for entry in cache:
        r = entry[0]
        label = model.relations.labels[r]
        params = model.rel_params[r]
        if isinstance(params, TranseRelation):
            _, idx, diff, norms = entry
            w = weights[idx]
            # Subgradient 0 at the norm kink (diff == 0).
            safe = np.where(norms > 0, norms, 1.0)
            unit = np.where(norms[:, None] > 0, diff / safe[:, None], 0.0)
            contrib = unit * w[:, None]
            grads[f"rel:{label}:t"] += contrib.sum(axis=0)
            np.add.at(ent_grad, triples[idx, 0], contrib)
            np.add.at(ent_grad, triples[idx, 2], -contrib)
        else:
            _, idx, H, T, a = entry
            w = weights[idx]
            # c[n, i] = w_n * u_i * (1 - a_ni^2): sensitivity of f to slice i.
            c = (1.0 - a * a) * params.u[None, :] * w[:, None]
            grads[f"rel:{label}:W"] += np.einsum("nk,nd,ne->dek", c, H, T)
            cat = np.concatenate([H, T], axis=1)
            grads[f"rel:{label}:V"] += c.T @ cat
            grads[f"rel:{label}:b"] += c.sum(axis=0)
            grads[f"rel:{label}:u"] += (a * w[:, None]).sum(axis=0)
            dH = np.einsum("nk,dek,ne->nd", c, params.W, T) + c @ params.V[:, :d]
            dT = np.einsum("nk,dek,nd->ne", c, params.W, H) + c @ params.V[:, d:]
            np.add.at(ent_grad, triples[idx, 0], dH)
            np.add.at(ent_grad, triples[idx, 2], dT)


def train(
    model: KgModel, train_store: TripleStore, config: ModelConfig | None = None
) -> tuple[KgModel, TrainReport]:
    """Run the sample / corrupt / gradient / step loop; seeded and reproducible.

    The smoothed variant trains with the mixed objective, the others with the
    plain hinge.  Returns a fresh trained model and the per-epoch mean loss.
    """
    if len(train_store) == 0:
        raise ValueError("train_store is empty")
    config = model.config if config is None else config
    config.validate()
    model = model.copy()

    rng_corrupt = np.random.default_rng([config.seed, _SEED_CORRUPT])
    rng_noise = np.random.default_rng([config.seed, _SEED_NOISE])
    optimizer = make_optimizer(config.optimizer, config.learning_rate)
    trainable = set(model.trainable_keys())
    triples = list(train_store.triples)
    n = len(triples)
    batch_size = min(config.batch_size, n)

    epoch_losses: list[float] = []
    for epoch in range(config.epochs):
        order = rng_corrupt.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            batch_idx = order[start : start + batch_size]
            positives = [triples[i] for i in batch_idx]
            negatives = [
                corrupt_tail(Triple(*p), train_store, rng_corrupt) for p in positives
            ]
            if model.variant == "sntl":
                noise = draw_batch_noise(model, positives, negatives, config.s, rng_noise)
                loss, grads = _smooth_loss_and_grads(
                    model, positives, negatives, config.alpha, noise
                )
            else:
                loss, grads = _hinge_loss_and_grads(model, positives, negatives)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch + 1}, batch {start // batch_size + 1}"
                )
            total += loss * len(positives)
            params = model.parameters()
            for key in params:
                if key in trainable:
                    optimizer.update(key, params[key], grads[key])
        epoch_losses.append(total / n)
    return model, TrainReport(variant=model.variant, epoch_losses=epoch_losses)


def lipschitz_estimate(
    model: KgModel,
    triples: Sequence[IdTriple],
    s: float,
    rng: np.random.Generator,
    samples_per_triple: int = 1,
    normalized: bool = True,
) -> float:
    """Mean |score change| per unit embedding perturbation over the triples.

    For each triple and draw, both endpoint embeddings get N(0, s^2 I) noise;
    the score difference is divided by the joint perturbation norm (set
    `normalized=False` for the raw difference).  Zero-norm draws resample.
    """
    if s <= 0:
        raise ValueError(f"s must be > 0, got {s}")
    if len(triples) == 0:
        raise ValueError("triples must be non-empty")
    d = model.entity_vecs.shape[1]
    ratios = []
    for h, r, t in triples:
        h_vec = model.entity_vecs[h]
        t_vec = model.entity_vecs[t]
        base = score(model, h_vec, int(r), t_vec)
        for _ in range(samples_per_triple):
            while True:
                eps = rng.normal(0.0, s, size=2 * d)
                norm = float(np.linalg.norm(eps))
                if norm > 0:
                    break
            noisy = score(model, h_vec + eps[:d], int(r), t_vec + eps[d:])
            delta = abs(noisy - base)
            ratios.append(delta / norm if normalized else delta)
    return float(np.mean(ratios))
