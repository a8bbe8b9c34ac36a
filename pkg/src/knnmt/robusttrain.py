"""Head training with perturbation-based robustness.

Two training-only perturbations hit the retrieved pairs: Gaussian noise on
the keys, and injection of a pseudo pair carrying the ground-truth token when
retrieval missed it. Both are gated per timestep by a ratio alpha that decays
exponentially in the training step. Evaluation code never calls anything in
this module except the loss.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .basemodel import BaseModelParams, corpus_timesteps, forward_batch
from .datastore import Datastore, Neighbor, knn_search_batch
from .headops import batch_features, batch_loss_and_grads
from .knnhead import PROB_FLOOR, HeadParams, InterpolationTrace
from .mathcore import AdamState, SeededRng, adam_step, finite_diff_grad

KEY_NOISE = "key-noise"
PSEUDO_PAIR = "pseudo-pair"


@dataclass
class TrainConfig:
    k: int = 8
    alpha0: float = 1.0
    beta: float = 1000.0
    sigma: float = 0.01
    learning_rate: float = 3e-4
    batch_size: int = 32
    total_steps: int = 5000
    seed: int = 0
    variant: str = "robust"
    key_noise: bool = True
    pseudo_pair: bool = True
    decay: bool = True

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not 0.0 <= self.alpha0 <= 1.0:
            raise ValueError("alpha0 must lie in [0, 1]")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass
class PerturbationEvent:
    step: int
    timestep_id: int
    kind: str
    alpha: float


def alpha_schedule(step: int, alpha0: float, beta: float) -> float:
    """Perturbation ratio alpha0 * exp(-step / beta)."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return alpha0 * math.exp(-step / beta)


def perturb_keys(neighbors: Sequence[Neighbor], query: np.ndarray, alpha: float,
                 sigma: float, rng: SeededRng) -> list[Neighbor]:
    """With one per-timestep uniform draw < alpha, add N(0, sigma^2 I) noise to
    every retrieved key, recompute distances against the query and re-sort.
    Values and recorded confidences never move."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if rng.random() >= alpha:
        return list(neighbors)
    if sigma == 0.0:
        return list(neighbors)
    k = len(neighbors)
    noise = rng.normal((k, len(query))) * sigma
    out = [Neighbor(index=n.index,
                    distance=float(np.linalg.norm(n.key + noise[i] - query)),
                    value=n.value, key_conf=n.key_conf, key=n.key + noise[i])
           for i, n in enumerate(neighbors)]
    out.sort(key=lambda n: n.distance)  # stable: ties keep prior order
    return out


def inject_pseudo_pair(neighbors: Sequence[Neighbor], query: np.ndarray, y_t: int,
                       query_conf: float, alpha: float, sigma: float,
                       rng: SeededRng) -> list[Neighbor]:
    """If the ground truth was not retrieved, gate on an independent uniform
    draw and insert (query + noise, y_t) at its sorted position, dropping the
    largest-distance pair. ``query_conf`` is the base model's probability on
    y_t at this step and becomes the pseudo pair's recorded confidence."""
    if any(n.value == y_t for n in neighbors):
        return list(neighbors)
    if rng.random() >= alpha:
        return list(neighbors)
    eps = np.asarray(rng.normal(len(query))) * sigma
    pseudo = Neighbor(index=-1, distance=float(np.linalg.norm(eps)), value=y_t,
                      key_conf=query_conf, key=query + eps)
    dists = [n.distance for n in neighbors]
    pos = bisect.bisect_left(dists, pseudo.distance)
    out = list(neighbors)
    out.insert(pos, pseudo)
    return out[:len(neighbors)]


def head_loss(trace: InterpolationTrace, y_t: int) -> float:
    """Negative log-likelihood of the final distribution on the target token."""
    return float(-np.log(max(float(trace.p_final[y_t]), PROB_FLOOR)))


@dataclass
class IntervalStats:
    step_lo: int
    step_hi: int
    mean_loss: float
    alpha: float
    key_noise_events: int
    pseudo_pair_events: int


@dataclass
class TrainReport:
    total_steps: int
    batch_size: int
    intervals: list[IntervalStats] = field(default_factory=list)
    events: list[PerturbationEvent] = field(default_factory=list)
    checkpoint_path: str | None = None

    def event_counts(self) -> dict[str, int]:
        counts = {KEY_NOISE: 0, PSEUDO_PAIR: 0}
        for ev in self.events:
            counts[ev.kind] += 1
        return counts

    def to_text(self) -> str:
        counts = self.event_counts()
        lines = [f"total_steps = {self.total_steps}",
                 f"batch_size = {self.batch_size}",
                 f"key_noise_events = {counts[KEY_NOISE]}",
                 f"pseudo_pair_events = {counts[PSEUDO_PAIR]}",
                 f"checkpoint_path = {self.checkpoint_path or ''}",
                 "",
                 "interval\tsteps\tmean_loss\talpha\tkey_noise\tpseudo_pair"]
        for i, iv in enumerate(self.intervals):
            lines.append(f"{i}\t[{iv.step_lo},{iv.step_hi})\t{iv.mean_loss:.6f}"
                         f"\t{iv.alpha:.6f}\t{iv.key_noise_events}\t{iv.pseudo_pair_events}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())


def train_head(head: HeadParams, base: BaseModelParams, ds: Datastore, dev_corpus,
               config: TrainConfig, interval_size: int = 100
               ) -> tuple[HeadParams, TrainReport]:
    """Train the head's networks on teacher-forced dev timesteps.

    The base model and datastore are frozen, so per-timestep records and
    retrieval results are precomputed once; the loop only perturbs, evaluates
    the head and applies Adam to the variant's trainable blocks.
    """
    if len(ds) < config.k:
        raise ValueError(f"datastore has {len(ds)} entries, need at least k={config.k}")
    work = head.copy()
    report = TrainReport(total_steps=config.total_steps, batch_size=config.batch_size)
    trainable = work.trainable_block_names()
    if config.total_steps == 0 or not trainable:
        return work, report

    src, prev, tgt = corpus_timesteps(dev_corpus, base.bos)
    hidden, probs = forward_batch(base, src, prev)
    n = len(tgt)
    idx, dist = knn_search_batch(ds, hidden, config.k)
    neigh_val = ds.values[idx]
    neigh_conf = ds.key_conf[idx]
    neigh_key = ds.keys[idx]

    rng = SeededRng(config.seed)
    shuffle_rng = rng.child("shuffle")
    noise_rng = rng.child(KEY_NOISE)
    pseudo_rng = rng.child(PSEUDO_PAIR)

    state = AdamState.init({name: work.blocks[name] for name in trainable})
    order = shuffle_rng.child("epoch-0").permutation(n)
    cursor, epoch = 0, 0
    interval_losses: list[float] = []
    interval_events = {KEY_NOISE: 0, PSEUDO_PAIR: 0}
    interval_alpha = config.alpha0

    perturbing = config.key_noise or config.pseudo_pair
    for step in range(config.total_steps):
        alpha = alpha_schedule(step, config.alpha0, config.beta) if config.decay else config.alpha0
        if step % interval_size == 0:
            interval_alpha = alpha
        batch_ids = np.empty(config.batch_size, dtype=np.int64)
        for pos in range(config.batch_size):
            if cursor == n:
                epoch += 1
                order = shuffle_rng.child(f"epoch-{epoch}").permutation(n)
                cursor = 0
            batch_ids[pos] = order[cursor]
            cursor += 1

        if not perturbing:
            bd, bv, bc = dist[batch_ids], neigh_val[batch_ids], neigh_conf[batch_ids]
        else:
            b = len(batch_ids)
            bd = np.empty((b, config.k))
            bv = np.empty((b, config.k), dtype=np.int64)
            bc = np.empty((b, config.k))
            for row, i in enumerate(batch_ids):
                neighbors = [Neighbor(int(idx[i, j]), float(dist[i, j]), int(neigh_val[i, j]),
                                      float(neigh_conf[i, j]), neigh_key[i, j])
                             for j in range(config.k)]
                if config.key_noise:
                    noised = perturb_keys(neighbors, hidden[i], alpha, config.sigma, noise_rng)
                    if noised and neighbors and noised[0] is not neighbors[0]:
                        report.events.append(PerturbationEvent(step, int(i), KEY_NOISE, alpha))
                        interval_events[KEY_NOISE] += 1
                    neighbors = noised
                if config.pseudo_pair:
                    neighbors = inject_pseudo_pair(neighbors, hidden[i], int(tgt[i]),
                                                   float(probs[i, tgt[i]]), alpha,
                                                   config.sigma, pseudo_rng)
                    if any(nb.index == -1 for nb in neighbors):
                        report.events.append(PerturbationEvent(step, int(i), PSEUDO_PAIR, alpha))
                        interval_events[PSEUDO_PAIR] += 1
                for col, nb in enumerate(neighbors):
                    bd[row, col] = nb.distance
                    bv[row, col] = nb.value
                    bc[row, col] = nb.key_conf

        feats = batch_features(probs[batch_ids], bv, bd, bc)
        p_base_y = probs[batch_ids, tgt[batch_ids]]
        loss, grads = batch_loss_and_grads(work, feats, p_base_y, tgt[batch_ids])
        sub = {name: work.blocks[name] for name in trainable}
        sub, state = adam_step(sub, grads, state, config.learning_rate)
        work.blocks.update(sub)

        interval_losses.append(loss)
        if (step + 1) % interval_size == 0 or step + 1 == config.total_steps:
            report.intervals.append(IntervalStats(
                step_lo=step + 1 - len(interval_losses), step_hi=step + 1,
                mean_loss=float(np.mean(interval_losses)), alpha=interval_alpha,
                key_noise_events=interval_events[KEY_NOISE],
                pseudo_pair_events=interval_events[PSEUDO_PAIR]))
            interval_losses = []
            interval_events = {KEY_NOISE: 0, PSEUDO_PAIR: 0}
    return work, report


def grad_check(head: HeadParams, fixture) -> float:
    """Max relative error between analytic and central-difference gradients of
    the batched loss; 0.0 when the variant has no trainable blocks."""
    feats, p_base_y, y = fixture
    trainable = head.trainable_block_names()
    if not trainable:
        return 0.0
    _, analytic = batch_loss_and_grads(head, feats, p_base_y, y)

    def loss_fn(blocks):
        probe = head.copy()
        probe.blocks.update(blocks)
        from .headops import batch_loss
        return batch_loss(probe, feats, p_base_y, y)

    numeric = finite_diff_grad(loss_fn, {name: head.blocks[name] for name in trainable}, eps=1e-5)
    worst = 0.0
    for name in trainable:
        a, nu = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(nu)), 1e-6)
        worst = max(worst, float((np.abs(a - nu) / denom).max()))
    return worst


def random_fixture(seed: int, k: int = 8, batch: int = 16, v_tgt: int = 20):
    """Random but structurally valid feature batch for gradient checks."""
    rng = SeededRng(seed)
    dist = np.sort(rng.child("dist").random((batch, k)) * 3.0, axis=1)
    values = rng.child("values").integers(0, v_tgt, size=(batch, k)).astype(np.int64)
    logits = rng.child("logits").random((batch, v_tgt)) * 6.0 - 3.0
    from .mathcore import softmax
    probs = softmax(logits)
    key_conf = rng.child("conf").random((batch, k)) * 0.98 + 0.01
    y = values[np.arange(batch), rng.child("pick").integers(0, k, size=batch)]
    miss = rng.child("miss").random(batch) < 0.5
    y = np.where(miss, rng.child("ymiss").integers(0, v_tgt, size=batch), y)
    feats = batch_features(probs, values, dist, key_conf)
    p_base_y = probs[np.arange(batch), y]
    return feats, p_base_y, y


def randomize_head(head: HeadParams, seed: int, scale: float = 0.1) -> HeadParams:
    """Copy of ``head`` with all blocks drawn uniform(-scale, scale)."""
    rng = SeededRng(seed)
    out = head.copy()
    for name, blk in out.blocks.items():
        out.blocks[name] = (rng.child(name).random(blk.shape) * 2.0 - 1.0) * scale
    return out
