"""Per-position feed-forward transducer standing in for a pre-trained NMT decoder.

Each step consumes the current source token and the previous target token,
produces a hidden state h_t = tanh(W_h [e_src; e_prev] + b_h), and predicts the
target token with softmax(W_o h_t + b_o). The hidden state doubles as the
retrieval key, so the model's only job is to expose (h_t, p_t) per step.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .mathcore import AdamState, SeededRng, adam_step, softmax
from .toytask import Corpus

MODEL_MAGIC = b"KNBM"
MODEL_VERSION = 1

StepHook = Callable[[int, "ForwardRecord"], np.ndarray]


@dataclass
class BaseModelParams:
    v_src: int
    v_tgt: int
    emb_dim: int
    hidden_dim: int
    emb_src: np.ndarray    # (v_src, e)
    emb_prev: np.ndarray   # (v_tgt + 1, e); last row is begin-of-sequence
    w_hidden: np.ndarray   # (d, 2e)
    b_hidden: np.ndarray   # (d,)
    w_out: np.ndarray      # (v_tgt, d)
    b_out: np.ndarray      # (v_tgt,)

    @property
    def bos(self) -> int:
        return self.v_tgt

    def blocks(self) -> dict[str, np.ndarray]:
        return {"emb_src": self.emb_src, "emb_prev": self.emb_prev,
                "w_hidden": self.w_hidden, "b_hidden": self.b_hidden,
                "w_out": self.w_out, "b_out": self.b_out}

    def replace_blocks(self, blocks: dict[str, np.ndarray]) -> "BaseModelParams":
        return BaseModelParams(self.v_src, self.v_tgt, self.emb_dim, self.hidden_dim,
                               blocks["emb_src"], blocks["emb_prev"],
                               blocks["w_hidden"], blocks["b_hidden"],
                               blocks["w_out"], blocks["b_out"])

    @classmethod
    def zeros(cls, v_src: int, v_tgt: int, emb_dim: int = 16, hidden_dim: int = 32) -> "BaseModelParams":
        return cls(v_src, v_tgt, emb_dim, hidden_dim,
                   np.zeros((v_src, emb_dim)), np.zeros((v_tgt + 1, emb_dim)),
                   np.zeros((hidden_dim, 2 * emb_dim)), np.zeros(hidden_dim),
                   np.zeros((v_tgt, hidden_dim)), np.zeros(v_tgt))


def init_base_params(v_src: int, v_tgt: int, emb_dim: int = 16, hidden_dim: int = 32,
                     seed: int = 0) -> BaseModelParams:
    rng = SeededRng(seed)
    def uniform(stream: str, shape, scale):
        return (rng.child(stream).random(shape) * 2.0 - 1.0) * scale

    lim_h = np.sqrt(6.0 / (2 * emb_dim + hidden_dim))
    lim_o = np.sqrt(6.0 / (hidden_dim + v_tgt))
    return BaseModelParams(
        v_src, v_tgt, emb_dim, hidden_dim,
        emb_src=uniform("emb-src", (v_src, emb_dim), 0.5),
        emb_prev=uniform("emb-prev", (v_tgt + 1, emb_dim), 0.5),
        w_hidden=uniform("w-hidden", (hidden_dim, 2 * emb_dim), lim_h),
        b_hidden=np.zeros(hidden_dim),
        w_out=uniform("w-out", (v_tgt, hidden_dim), lim_o),
        b_out=np.zeros(v_tgt),
    )


@dataclass
class ForwardRecord:
    t: int
    hidden: np.ndarray  # (d,)
    logits: np.ndarray  # (v_tgt,)
    probs: np.ndarray   # (v_tgt,)


def forward_step(params: BaseModelParams, src_token: int, prev_token: int,
                 t: int = 0) -> ForwardRecord:
    """Single teacher-forced step. ``prev_token`` is params.bos at t=0."""
    if not 0 <= src_token < params.v_src:
        raise ValueError(f"source token {src_token} out of range")
    if not 0 <= prev_token <= params.v_tgt:
        raise ValueError(f"previous target token {prev_token} out of range")
    x = np.concatenate([params.emb_src[src_token], params.emb_prev[prev_token]])
    hidden = np.tanh(params.w_hidden @ x + params.b_hidden)
    logits = params.w_out @ hidden + params.b_out
    return ForwardRecord(t=t, hidden=hidden, logits=logits, probs=softmax(logits))


def forward_batch(params: BaseModelParams, src_tokens: np.ndarray,
                  prev_tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized teacher-forced forward; returns (hidden (B,d), probs (B,V_t))."""
    x = np.concatenate([params.emb_src[src_tokens], params.emb_prev[prev_tokens]], axis=1)
    hidden = np.tanh(x @ params.w_hidden.T + params.b_hidden)
    logits = hidden @ params.w_out.T + params.b_out
    return hidden, softmax(logits)


def corpus_timesteps(corpus: Corpus, bos: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flatten a corpus into (src, prev, tgt) token arrays in corpus order."""
    src_all, prev_all, tgt_all = [], [], []
    for src, tgt in corpus.pairs:
        src_all.append(src)
        prev_all.append(np.concatenate([[bos], tgt[:-1]]))
        tgt_all.append(tgt)
    return (np.concatenate(src_all), np.concatenate(prev_all), np.concatenate(tgt_all))


def confidence(record: ForwardRecord, token: int) -> float:
    """The model's predicted probability on ``token``."""
    if not 0 <= token < record.probs.shape[0]:
        raise ValueError(f"token {token} out of range")
    return float(record.probs[token])


def train_base(params: BaseModelParams, corpus: Corpus, epochs: int, lr: float,
               seed: int, batch_size: int = 64) -> BaseModelParams:
    """Teacher-forced cross-entropy training with Adam; deterministic per seed."""
    if len(corpus.pairs) == 0:
        raise ValueError("cannot train on an empty corpus")
    src, prev, tgt = corpus_timesteps(corpus, params.bos)
    if src.max() >= params.v_src or tgt.max() >= params.v_tgt:
        raise ValueError("corpus tokens exceed model vocabulary")
    n = src.shape[0]
    blocks = {k: v.copy() for k, v in params.blocks().items()}
    state = AdamState.init(blocks)
    rng = SeededRng(seed)
    for epoch in range(epochs):
        order = rng.child(f"epoch-{epoch}").permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            grads = _base_grads(blocks, params, src[idx], prev[idx], tgt[idx])
            blocks, state = adam_step(blocks, grads, state, lr)
    return params.replace_blocks(blocks)


def _base_grads(blocks: dict[str, np.ndarray], shape_ref: BaseModelParams,
                src: np.ndarray, prev: np.ndarray, tgt: np.ndarray) -> dict[str, np.ndarray]:
    e = shape_ref.emb_dim
    b = src.shape[0]
    x = np.concatenate([blocks["emb_src"][src], blocks["emb_prev"][prev]], axis=1)
    hidden = np.tanh(x @ blocks["w_hidden"].T + blocks["b_hidden"])
    logits = hidden @ blocks["w_out"].T + blocks["b_out"]
    probs = softmax(logits)

    dlogits = probs.copy()
    dlogits[np.arange(b), tgt] -= 1.0
    dlogits /= b
    dw_out = dlogits.T @ hidden
    db_out = dlogits.sum(axis=0)
    dhidden = dlogits @ blocks["w_out"]
    dz = dhidden * (1.0 - hidden * hidden)
    dw_hidden = dz.T @ x
    db_hidden = dz.sum(axis=0)
    dx = dz @ blocks["w_hidden"]
    demb_src = np.zeros_like(blocks["emb_src"])
    demb_prev = np.zeros_like(blocks["emb_prev"])
    np.add.at(demb_src, src, dx[:, :e])
    np.add.at(demb_prev, prev, dx[:, e:])
    return {"emb_src": demb_src, "emb_prev": demb_prev,
            "w_hidden": dw_hidden, "b_hidden": db_hidden,
            "w_out": dw_out, "b_out": db_out}


def dataset_loss(params: BaseModelParams, corpus: Corpus) -> float:
    """Mean teacher-forced cross-entropy over all corpus timesteps."""
    src, prev, tgt = corpus_timesteps(corpus, params.bos)
    _, probs = forward_batch(params, src, prev)
    return float(-np.log(np.maximum(probs[np.arange(len(tgt)), tgt], 1e-300)).mean())


def greedy_decode(params: BaseModelParams, source: np.ndarray,
                  hook: StepHook | None = None) -> np.ndarray:
    """Argmax decoding; ``hook(t, record)`` may replace the step distribution."""
    out = np.empty(len(source), dtype=np.int64)
    prev = params.bos
    for t, s in enumerate(source):
        record = forward_step(params, int(s), prev, t=t)
        probs = record.probs if hook is None else hook(t, record)
        out[t] = int(np.argmax(probs))
        prev = out[t]
    return out


def save_base_model(params: BaseModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_base_model(params))


def serialize_base_model(params: BaseModelParams) -> bytes:
    head = MODEL_MAGIC + struct.pack("<IIIII", MODEL_VERSION, params.v_src,
                                     params.v_tgt, params.emb_dim, params.hidden_dim)
    body = b"".join(blk.astype("<f8").tobytes() for blk in params.blocks().values())
    return head + body


def load_base_model(path) -> BaseModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 24 or raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a base-model checkpoint")
    version, v_src, v_tgt, e, d = struct.unpack("<IIIII", raw[4:24])
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    shapes = [("emb_src", (v_src, e)), ("emb_prev", (v_tgt + 1, e)),
              ("w_hidden", (d, 2 * e)), ("b_hidden", (d,)),
              ("w_out", (v_tgt, d)), ("b_out", (v_tgt,))]
    need = 24 + sum(int(np.prod(s)) for _, s in shapes) * 8
    if len(raw) != need:
        raise ValueError(f"{path}: checkpoint size mismatch (got {len(raw)}, want {need})")
    off = 24
    blocks = {}
    for name, shape in shapes:
        cnt = int(np.prod(shape))
        blocks[name] = np.frombuffer(raw, dtype="<f8", count=cnt, offset=off).reshape(shape).copy()
        off += cnt * 8
    return BaseModelParams(v_src, v_tgt, e, d, **blocks)


def model_digest(params: BaseModelParams) -> str:
    """Content hash used as the checkpoint id in datastore manifests."""
    return hashlib.sha256(serialize_base_model(params)).hexdigest()[:16]
