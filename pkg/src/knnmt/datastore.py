"""Key-value datastore: build, exact search, pruning, binary persistence.

Keys are decoder hidden states recorded during a teacher-forced pass, values
are the ground-truth target tokens, and each entry also records the base
model's probability on its own value (the entry's confidence). Confidence is
fixed at build time, so pruning by confidence never re-runs the model.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .basemodel import BaseModelParams, corpus_timesteps, forward_batch, model_digest
from .toytask import Corpus, corpus_digest

DATASTORE_MAGIC = b"KNDS"
DATASTORE_VERSION = 1


class DatastoreFormatError(ValueError):
    """Bad magic bytes or unsupported format version."""


class DatastoreTruncatedError(ValueError):
    """File ends before the header-declared entry payload."""


class DatastoreDimensionError(ValueError):
    """Entry dimension inconsistent with what the caller or payload expects."""


@dataclass
class Entry:
    key: np.ndarray
    value: int
    key_conf: float


@dataclass
class Neighbor:
    """One retrieved pair. ``index`` is -1 for synthetic training-time pairs."""
    index: int
    distance: float
    value: int
    key_conf: float
    key: np.ndarray


@dataclass
class Datastore:
    dim: int
    keys: np.ndarray       # (n, dim) float64
    values: np.ndarray     # (n,) int64
    key_conf: np.ndarray   # (n,) float64, in (0, 1]
    manifest: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.keys = np.ascontiguousarray(self.keys, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.int64)
        self.key_conf = np.asarray(self.key_conf, dtype=np.float64)
        if self.keys.ndim != 2 or self.keys.shape[1] != self.dim:
            raise DatastoreDimensionError(f"keys shape {self.keys.shape} != (n, {self.dim})")
        n = self.keys.shape[0]
        if self.values.shape != (n,) or self.key_conf.shape != (n,):
            raise ValueError("values/key_conf length mismatch")
        self.manifest.setdefault("entry_count", str(n))

    def __len__(self) -> int:
        return self.keys.shape[0]

    def entry(self, i: int) -> Entry:
        return Entry(key=self.keys[i].copy(), value=int(self.values[i]),
                     key_conf=float(self.key_conf[i]))

    def _subset(self, keep: np.ndarray) -> "Datastore":
        manifest = dict(self.manifest)
        manifest["entry_count"] = str(int(keep.sum()) if keep.dtype == bool else len(keep))
        return Datastore(self.dim, self.keys[keep], self.values[keep],
                         self.key_conf[keep], manifest)


def build_datastore(params: BaseModelParams, corpus: Corpus) -> Datastore:
    """One entry per target token of the corpus, in corpus order."""
    if len(corpus.pairs) == 0:
        return Datastore(params.hidden_dim, np.zeros((0, params.hidden_dim)),
                         np.zeros(0, dtype=np.int64), np.zeros(0),
                         _manifest(params, corpus, 0))
    src, prev, tgt = corpus_timesteps(corpus, params.bos)
    if src.max() >= params.v_src or tgt.max() >= params.v_tgt or src.min() < 0 or tgt.min() < 0:
        raise ValueError("corpus tokens exceed model vocabulary")
    hidden, probs = forward_batch(params, src, prev)
    conf = probs[np.arange(len(tgt)), tgt]
    return Datastore(params.hidden_dim, hidden, tgt.astype(np.int64), conf,
                     _manifest(params, corpus, len(tgt)))


def _manifest(params: BaseModelParams, corpus: Corpus, count: int) -> dict[str, str]:
    return {"corpus_id": corpus_digest(corpus), "model_id": model_digest(params),
            "built_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "entry_count": str(count)}


def knn_search(ds: Datastore, query: np.ndarray, k: int) -> list[Neighbor]:
    """Exact k nearest entries by Euclidean distance, ascending, ties by index."""
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (ds.dim,):
        raise DatastoreDimensionError(f"query shape {query.shape} != ({ds.dim},)")
    if not 1 <= k <= len(ds):
        raise ValueError(f"k={k} out of range for datastore of size {len(ds)}")
    idx, sq = kernels.topk_sq_l2(ds.keys, query[None, :], k)
    return neighbors_from_indices(ds, idx[0], np.sqrt(sq[0]))


def knn_search_batch(ds: Datastore, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched exact search; returns (indices (m,k), distances (m,k))."""
    if queries.ndim != 2 or queries.shape[1] != ds.dim:
        raise DatastoreDimensionError(f"queries shape {queries.shape} != (m, {ds.dim})")
    if not 1 <= k <= len(ds):
        raise ValueError(f"k={k} out of range for datastore of size {len(ds)}")
    idx, sq = kernels.topk_sq_l2(ds.keys, queries, k)
    return idx, np.sqrt(sq)


def neighbors_from_indices(ds: Datastore, idx: np.ndarray, dist: np.ndarray) -> list[Neighbor]:
    return [Neighbor(index=int(i), distance=float(d), value=int(ds.values[i]),
                     key_conf=float(ds.key_conf[i]), key=ds.keys[i].copy())
            for i, d in zip(idx, dist)]


def prune_random(ds: Datastore, fraction: float, seed: int) -> Datastore:
    """Remove round(fraction * n) uniformly chosen entries."""
    from .mathcore import SeededRng

    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    n = len(ds)
    n_remove = int(round(fraction * n))
    removed = SeededRng(seed).permutation(n)[:n_remove]
    keep = np.ones(n, dtype=bool)
    keep[removed] = False
    return ds._subset(keep)


def prune_confidence_top(ds: Datastore, fraction: float) -> Datastore:
    """Remove the round(fraction * n) entries with the highest confidence."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    n = len(ds)
    n_remove = int(round(fraction * n))
    order = np.argsort(-ds.key_conf, kind="stable")  # descending, ties by index
    keep = np.ones(n, dtype=bool)
    keep[order[:n_remove]] = False
    return ds._subset(keep)


def prune_confidence_interval(ds: Datastore, lo_pct: float, hi_pct: float) -> Datastore:
    """Remove the descending-confidence rank interval [lo_pct, hi_pct) percent."""
    if not 0.0 <= lo_pct < hi_pct <= 100.0:
        raise ValueError("need 0 <= lo_pct < hi_pct <= 100")
    n = len(ds)
    start = int(np.floor(lo_pct * n / 100.0))
    stop = int(np.floor(hi_pct * n / 100.0))
    if stop - start >= n:
        raise ValueError("interval removal would empty the datastore")
    order = np.argsort(-ds.key_conf, kind="stable")
    keep = np.ones(n, dtype=bool)
    keep[order[start:stop]] = False
    return ds._subset(keep)


def _entry_dtype(dim: int) -> np.dtype:
    return np.dtype([("key", "<f8", (dim,)), ("value", "<u4"), ("key_conf", "<f8")])


def save_datastore(ds: Datastore, path) -> None:
    """Binary entries plus a sidecar text manifest at ``<path>.manifest``."""
    import struct

    if np.any(ds.values < 0) or np.any(ds.values >= 2 ** 32):
        raise ValueError("values do not fit the u32 on-disk field")
    packed = np.empty(len(ds), dtype=_entry_dtype(ds.dim))
    packed["key"] = ds.keys
    packed["value"] = ds.values.astype(np.uint32)
    packed["key_conf"] = ds.key_conf
    blob = (DATASTORE_MAGIC + struct.pack("<II", DATASTORE_VERSION, ds.dim)
            + struct.pack("<Q", len(ds)) + packed.tobytes())
    with open(path, "wb") as fh:
        fh.write(blob)
    manifest_lines = [f"{k} = {v}" for k, v in ds.manifest.items()]
    with open(f"{path}.manifest", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(manifest_lines) + "\n")


def load_datastore(path, expected_dim: int | None = None) -> Datastore:
    import os
    import struct

    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != DATASTORE_MAGIC:
        raise DatastoreFormatError(f"{path}: bad magic bytes")
    if len(raw) < 20:
        raise DatastoreTruncatedError(f"{path}: header truncated")
    version, dim = struct.unpack("<II", raw[4:12])
    (count,) = struct.unpack("<Q", raw[12:20])
    if version != DATASTORE_VERSION:
        raise DatastoreFormatError(f"{path}: unsupported version {version}")
    if dim == 0:
        raise DatastoreDimensionError(f"{path}: zero entry dimension")
    if expected_dim is not None and dim != expected_dim:
        raise DatastoreDimensionError(f"{path}: dim {dim} != expected {expected_dim}")
    dtype = _entry_dtype(dim)
    need = 20 + count * dtype.itemsize
    if len(raw) < need:
        raise DatastoreTruncatedError(f"{path}: expected {need} bytes, got {len(raw)}")
    if len(raw) > need:
        raise DatastoreFormatError(f"{path}: {len(raw) - need} trailing bytes")
    packed = np.frombuffer(raw, dtype=dtype, count=count, offset=20)
    manifest = {}
    mpath = f"{path}.manifest"
    if os.path.exists(mpath):
        with open(mpath, "r", encoding="utf-8") as fh:
            for line in fh:
                if "=" in line:
                    k, v = line.split("=", 1)
                    manifest[k.strip()] = v.strip()
    return Datastore(dim, packed["key"].copy(), packed["value"].astype(np.int64),
                     packed["key_conf"].copy(), manifest)
