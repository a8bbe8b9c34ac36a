"""Synthetic two-domain token translation task.

Source sentences follow a per-domain Markov chain; the target sequence is the
source mapped token-by-token through the domain's translation table (so source
and target always have equal length). The in-domain variant remaps a fixed
fraction of the table and re-samples the chain, which is what makes retrieval
from an in-domain datastore useful.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .mathcore import SeededRng


@dataclass
class DomainSpec:
    label: str
    v_src: int
    v_tgt: int
    table: np.ndarray       # (v_src,) target token per source token
    transition: np.ndarray  # (v_src, v_src) rows sum to 1

    def __post_init__(self) -> None:
        self.table = np.asarray(self.table, dtype=np.int64)
        self.transition = np.asarray(self.transition, dtype=np.float64)
        if self.table.shape != (self.v_src,):
            raise ValueError("translation table must map every source token")
        if np.any(self.table < 0) or np.any(self.table >= self.v_tgt):
            raise ValueError("translation table targets out of range")
        if self.transition.shape != (self.v_src, self.v_src):
            raise ValueError("transition matrix shape mismatch")
        rows = self.transition.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > 1e-9):
            raise ValueError("transition rows must sum to 1")


@dataclass
class Corpus:
    pairs: list[tuple[np.ndarray, np.ndarray]]
    label: str
    seed: int

    def __post_init__(self) -> None:
        for src, tgt in self.pairs:
            if len(src) != len(tgt):
                raise ValueError("source/target length mismatch in pair")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def token_count(self) -> int:
        return sum(len(t) for _, t in self.pairs)


def generate_domain_pair(seed: int, v_src: int, v_tgt: int, shift_fraction: float,
                         transition_sharpness: float = 3.0) -> tuple[DomainSpec, DomainSpec]:
    """General/in-domain spec pair differing in exactly round(shift*v_src) mappings.

    ``transition_sharpness`` skews transition rows: higher values concentrate
    each row's mass on fewer successors, producing rare transitions that the
    in-domain corpora only sparsely cover.
    """
    if v_src < 4:
        raise ValueError("v_src must be at least 4")
    if v_tgt < v_src:
        raise ValueError("v_tgt must be at least v_src")
    if not 0.0 <= shift_fraction <= 1.0:
        raise ValueError("shift_fraction must lie in [0, 1]")
    rng = SeededRng(seed)
    table_gen = rng.child("general-table").integers(0, v_tgt, size=v_src).astype(np.int64)

    n_shift = int(round(shift_fraction * v_src))
    shifted = rng.child("shift-select").permutation(v_src)[:n_shift]
    table_in = table_gen.copy()
    remap = rng.child("shift-remap")
    for s in shifted:
        draw = int(remap.integers(0, v_tgt - 1))
        table_in[s] = draw if draw < table_gen[s] else draw + 1  # never the old target

    trans_gen = _sample_transition(rng.child("general-transition"), v_src, transition_sharpness)
    trans_in = _sample_transition(rng.child("indomain-transition"), v_src, transition_sharpness)
    general = DomainSpec("general", v_src, v_tgt, table_gen, trans_gen)
    in_domain = DomainSpec("in_domain", v_src, v_tgt, table_in, trans_in)
    return general, in_domain


def _sample_transition(rng: SeededRng, v_src: int, sharpness: float) -> np.ndarray:
    # exponential draws -> Dirichlet(1) rows; raising to `sharpness` skews them
    u = rng.random((v_src, v_src))
    e = -np.log(1.0 - u)
    w = e ** sharpness
    return w / w.sum(axis=1, keepdims=True)


def stationary_distribution(transition: np.ndarray, tol: float = 1e-13,
                            max_iter: int = 100_000) -> np.ndarray:
    """Stationary row vector of a transition matrix, by power iteration."""
    n = transition.shape[0]
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = pi @ transition
        nxt /= nxt.sum()
        if np.abs(nxt - pi).max() < tol:
            return nxt
        pi = nxt
    return pi


def sample_corpus(spec: DomainSpec, n_sentences: int, length_range: tuple[int, int],
                  seed: int) -> Corpus:
    """Sample sentences from the domain chain; targets via the translation table.

    Initial tokens are drawn from the chain's stationary distribution; each
    sentence uses its own child stream so generation is order-independent.
    """
    lo, hi = length_range
    if lo < 2:
        raise ValueError("minimum sentence length is 2")
    if hi < lo:
        raise ValueError("empty length range")
    if n_sentences < 1:
        raise ValueError("need at least one sentence")
    rng = SeededRng(seed)
    init_cdf = np.cumsum(stationary_distribution(spec.transition))
    row_cdf = np.cumsum(spec.transition, axis=1)
    pairs = []
    for i in range(n_sentences):
        srng = rng.child(f"sentence-{i}")
        length = int(srng.integers(lo, hi + 1))
        draws = srng.random(length)
        src = np.empty(length, dtype=np.int64)
        src[0] = np.searchsorted(init_cdf, draws[0], side="right")
        for t in range(1, length):
            src[t] = np.searchsorted(row_cdf[src[t - 1]], draws[t], side="right")
        np.clip(src, 0, spec.v_src - 1, out=src)
        pairs.append((src, spec.table[src]))
    return Corpus(pairs=pairs, label=spec.label, seed=seed)


def split_corpus(corpus: Corpus, ratios: tuple[float, float, float]) -> tuple[Corpus, Corpus, Corpus]:
    """Order-preserving disjoint train/dev/test partition."""
    if any(r < 0 for r in ratios):
        raise ValueError("ratios must be non-negative")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(corpus.pairs)
    n_train = int(round(ratios[0] * n))
    n_dev = min(int(round(ratios[1] * n)), n - n_train)
    cut1, cut2 = n_train, n_train + n_dev
    parts = (corpus.pairs[:cut1], corpus.pairs[cut1:cut2], corpus.pairs[cut2:])
    return tuple(Corpus(pairs=list(p), label=corpus.label, seed=corpus.seed) for p in parts)


def save_corpus(corpus: Corpus, path) -> None:
    """One pair per line: space-separated source TAB space-separated target."""
    lines = [f"# domain={corpus.label} seed={corpus.seed}"]
    for src, tgt in corpus.pairs:
        lines.append(" ".join(map(str, src)) + "\t" + " ".join(map(str, tgt)))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_corpus(path) -> Corpus:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{path}: missing corpus header line")
    header = dict(item.split("=", 1) for item in lines[0][1:].split())
    pairs = []
    for line in lines[1:]:
        if not line.strip():
            continue
        src_txt, tgt_txt = line.split("\t")
        src = np.array([int(tok) for tok in src_txt.split()], dtype=np.int64)
        tgt = np.array([int(tok) for tok in tgt_txt.split()], dtype=np.int64)
        pairs.append((src, tgt))
    return Corpus(pairs=pairs, label=header.get("domain", "unknown"),
                  seed=int(header.get("seed", 0)))


def corpus_digest(corpus: Corpus) -> str:
    """Content hash used as the corpus id in datastore manifests."""
    h = hashlib.sha256()
    h.update(f"{corpus.label}|{corpus.seed}".encode())
    for src, tgt in corpus.pairs:
        h.update(src.astype("<i8").tobytes())
        h.update(tgt.astype("<i8").tobytes())
    return h.hexdigest()[:16]
