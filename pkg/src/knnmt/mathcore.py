"""Small dense float64 math: softmax, affine maps, Adam, seeded RNG, gradient oracle.

Everything here is deliberately tiny and hand-rolled so that training runs are
bit-deterministic per seed and analytic gradients can be checked against the
finite-difference oracle at tight tolerances.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

Params = dict[str, np.ndarray]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def ensure_finite(name: str, arr: np.ndarray) -> None:
    """Raise if any element of ``arr`` is NaN or infinite."""
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in {name}")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis (max-subtraction)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("softmax of empty input")
    ensure_finite("softmax input", logits)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Stable log-softmax over the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("log_softmax of empty input")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def affine(w: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Return ``w @ x + b`` with shape validation."""
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.ndim != 2 or x.ndim != 1 or b.ndim != 1:
        raise ValueError(f"affine expects matrix/vector/vector, got {w.ndim}/{b.ndim}/{x.ndim}")
    if w.shape[1] != x.shape[0] or w.shape[0] != b.shape[0]:
        raise ValueError(f"affine shape mismatch: w{w.shape} b{b.shape} x{x.shape}")
    out = w @ x + b
    ensure_finite("affine output", out)
    return out


def softplus(x: float | np.ndarray) -> float | np.ndarray:
    """Numerically stable log(1 + exp(x))."""
    x = np.asarray(x, dtype=np.float64)
    out = np.logaddexp(0.0, x)
    return float(out) if out.ndim == 0 else out


def sigmoid(x: float | np.ndarray) -> float | np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return float(out) if out.ndim == 0 else out


@dataclass
class AdamState:
    """First/second moment accumulators; one slot per parameter block."""

    m: Params
    v: Params
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def init(cls, params: Params, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
             eps: float = ADAM_EPS) -> "AdamState":
        zeros = {k: np.zeros_like(p) for k, p in params.items()}
        return cls(m=zeros, v={k: np.zeros_like(p) for k, p in params.items()},
                   t=0, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: Params, grads: Params, state: AdamState, lr: float) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update. Returns fresh params and state.

    Blocks present in ``params`` but absent from ``grads`` are carried over
    unchanged (their moments stay untouched).
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter block '{name}'")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for '{name}'")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in parameter block '{name}'")
    t = state.t + 1
    new_params: Params = {}
    new_m: Params = {}
    new_v: Params = {}
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if name in grads:
            g = grads[name]
            m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
            v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
            new_params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        else:
            m = state.m[name]
            v = state.v[name]
            new_params[name] = p.copy()
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, t=t, beta1=state.beta1,
                                 beta2=state.beta2, eps=state.eps)


def finite_diff_grad(f, params, eps: float = 1e-5):
    """Central-difference gradient of a scalar function.

    ``params`` may be a single ndarray or a dict of ndarrays; the result has
    the same structure. ``f`` receives a perturbed copy of ``params``.
    """
    if isinstance(params, np.ndarray):
        wrapped = {"x": params}
        grads = finite_diff_grad(lambda q: f(q["x"]), wrapped, eps)
        return grads["x"]
    grads: Params = {}
    work = {k: np.array(p, dtype=np.float64, copy=True) for k, p in params.items()}
    for name, p in work.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(work)
            flat[i] = orig - eps
            lo = f(work)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads


def derive_seed(seed: int, label: str) -> int:
    """Stable 64-bit child seed from (seed, label); hash-based, not Python hash."""
    digest = hashlib.blake2b(f"{seed}/{label}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class SeededRng:
    """Deterministic random stream with labelled child streams.

    Gaussian draws go through Box-Muller over uniforms so the byte-level
    sequence depends only on the seed, not on the platform's normal sampler.
    """

    seed: int
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, label: str) -> "SeededRng":
        """Independent stream derived from (seed, label)."""
        return SeededRng(derive_seed(self.seed, label))

    def random(self, size: int | tuple[int, ...] | None = None):
        """Uniform draws in [0, 1)."""
        return self._gen.random(size)

    def normal(self, size: int | tuple[int, ...] | None = None):
        """Standard normal draws via the Box-Muller transform."""
        n = 1 if size is None else int(np.prod(size))
        if n == 0:
            return np.zeros(0 if isinstance(size, int) else size)
        half = (n + 1) // 2
        u1 = 1.0 - self._gen.random(half)  # (0, 1]: keeps log finite
        u2 = self._gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * math.pi * u2),
                            r * np.sin(2.0 * math.pi * u2)])[:n]
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def integers(self, low: int, high: int, size: int | tuple[int, ...] | None = None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
