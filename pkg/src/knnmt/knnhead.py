"""Confidence-enhanced retrieval head.

Turns K retrieved pairs plus the base model's step distribution into a final
token distribution. Three variants share the plumbing:

* ``vanilla``   - constant mixing weight and temperature, no calibration.
* ``adaptive``  - temperature and kNN score learned from distance features
                  only; the base-model score collapses to a learned scalar.
* ``robust``    - full head: learned temperature, per-pair calibration from
                  confidence features, and a mixing weight that sees both the
                  retrieval and the base model's confidence.

The kNN distribution puts mass exp(-d_k / T + c_k) on each retrieved value and
the final distribution is the lambda-mix of that with the base distribution.
All probabilities are floored at 1e-10 before logs so features stay finite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .basemodel import ForwardRecord
from .datastore import Neighbor
from .mathcore import SeededRng, sigmoid, softplus

HEAD_MAGIC = b"KNHD"
HEAD_VERSION = 1

VARIANTS = ("vanilla", "adaptive", "robust")
_VARIANT_TAGS = {"vanilla": 0, "adaptive": 1, "robust": 2}
_TAG_VARIANTS = {v: k for k, v in _VARIANT_TAGS.items()}

TEMP_FLOOR = 1e-3
PROB_FLOOR = 1e-10

# (name, config scalars are serialized before these blocks, in this order)
_BLOCK_NAMES = ("dist_enc_w", "dist_enc_b", "temp_w", "temp_b",
                "knn_score_w", "knn_score_b", "conf_enc_w", "conf_enc_b",
                "calib_w", "calib_b", "nmt_score_w", "nmt_score_b",
                "dist_enc2_w", "dist_enc2_b")
_CONFIG_SCALARS = ("fixed_lambda", "fixed_temp", "use_calibration",
                   "use_weight_net", "shared_encoder", "squared_distances")


@dataclass
class FeatureBundle:
    """Per-timestep retrieval features, all length K."""

    distances: np.ndarray       # ascending Euclidean distances
    distinct_counts: np.ndarray  # r_k: distinct values among the k nearest
    logp_query: np.ndarray      # log p_base(v_k | query state)
    logp_key: np.ndarray        # log of each entry's recorded confidence
    logp_top: np.ndarray        # logs of the K largest base probabilities


@dataclass
class HeadParams:
    """Parameters and switches for one head variant.

    ``use_calibration`` and ``use_weight_net`` exist for ablations: switching
    them off reduces the robust head to c=0 or to a constant mixing weight.
    ``shared_encoder`` reuses the distance encoder between the temperature and
    the kNN score (the default); when False the score path gets its own
    encoder (``dist_enc2``). ``squared_distances`` feeds d^2 instead of d to
    everything that consumes distances.
    """

    variant: str
    k: int
    hidden_wp: int = 4
    hidden_dc: int = 32
    fixed_lambda: float = 0.5
    fixed_temp: float = 10.0
    use_calibration: bool = True
    use_weight_net: bool = True
    shared_encoder: bool = True
    squared_distances: bool = False
    blocks: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown head variant '{self.variant}'")
        if not self.blocks:
            self.blocks = _zero_blocks(self.k, self.hidden_wp, self.hidden_dc)
        for name, shape in _block_shapes(self.k, self.hidden_wp, self.hidden_dc).items():
            if self.blocks[name].shape != shape:
                raise ValueError(f"block '{name}' has shape {self.blocks[name].shape}, want {shape}")

    def copy(self) -> "HeadParams":
        return HeadParams(self.variant, self.k, self.hidden_wp, self.hidden_dc,
                          self.fixed_lambda, self.fixed_temp, self.use_calibration,
                          self.use_weight_net, self.shared_encoder, self.squared_distances,
                          {k: v.copy() for k, v in self.blocks.items()})

    def trainable_block_names(self) -> tuple[str, ...]:
        """Blocks that receive gradients under this variant's configuration."""
        if self.variant == "vanilla":
            return ()
        names = ["dist_enc_w", "dist_enc_b", "temp_w", "temp_b"]
        if self.use_weight_net:
            names += ["knn_score_w", "knn_score_b"]
            if not self.shared_encoder:
                names += ["dist_enc2_w", "dist_enc2_b"]
            if self.variant == "robust":
                names += ["nmt_score_w", "nmt_score_b"]
            else:  # adaptive: base-model score is a learned scalar only
                names += ["nmt_score_b"]
        if self.variant == "robust" and self.use_calibration:
            names += ["conf_enc_w", "conf_enc_b", "calib_w", "calib_b"]
        return tuple(names)


def _block_shapes(k: int, h_w: int, h_c: int) -> dict[str, tuple[int, ...]]:
    return {"dist_enc_w": (h_w, 2 * k), "dist_enc_b": (h_w,),
            "temp_w": (1, h_w), "temp_b": (1,),
            "knn_score_w": (1, h_w), "knn_score_b": (1,),
            "conf_enc_w": (h_c, 2), "conf_enc_b": (h_c,),
            "calib_w": (1, h_c), "calib_b": (1,),
            "nmt_score_w": (1, 3 * k), "nmt_score_b": (1,),
            "dist_enc2_w": (h_w, 2 * k), "dist_enc2_b": (h_w,)}


def _zero_blocks(k: int, h_w: int, h_c: int) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape) for name, shape in _block_shapes(k, h_w, h_c).items()}


def init_head_params(variant: str, k: int, seed: int, hidden_wp: int = 4,
                     hidden_dc: int = 32, fixed_lambda: float = 0.5,
                     fixed_temp: float = 10.0, use_calibration: bool | None = None,
                     use_weight_net: bool = True, shared_encoder: bool = True,
                     squared_distances: bool = False) -> HeadParams:
    """Fresh head. Encoders start uniform(-0.1, 0.1); score/output layers start
    at zero so the untrained head yields T = softplus(0) + floor, c = 0 and
    lambda = 0.5."""
    if use_calibration is None:
        use_calibration = variant == "robust"
    if variant == "vanilla":
        use_calibration = False
        use_weight_net = False
    blocks = _zero_blocks(k, hidden_wp, hidden_dc)
    rng = SeededRng(seed)
    for name in ("dist_enc_w", "conf_enc_w", "dist_enc2_w"):
        shape = blocks[name].shape
        blocks[name] = (rng.child(name).random(shape) * 2.0 - 1.0) * 0.1
    return HeadParams(variant, k, hidden_wp, hidden_dc, fixed_lambda, fixed_temp,
                      use_calibration, use_weight_net, shared_encoder,
                      squared_distances, blocks)


@dataclass
class InterpolationTrace:
    """Everything one head evaluation produced, for analysis and audit."""

    features: FeatureBundle
    temperature: float
    calib: np.ndarray          # (K,)
    s_knn: float
    s_nmt: float
    lam: float
    p_knn: np.ndarray          # (V_t,)
    p_base: np.ndarray         # (V_t,)
    p_final: np.ndarray        # (V_t,)
    ground_truth_retrieved: bool | None = None


def extract_features(record: ForwardRecord, neighbors: Sequence[Neighbor]) -> FeatureBundle:
    """Distance, diversity and confidence features of a sorted neighbor list."""
    k = len(neighbors)
    if k == 0:
        raise ValueError("need at least one neighbor")
    dist = np.array([n.distance for n in neighbors], dtype=np.float64)
    if np.any(np.diff(dist) < 0):
        raise ValueError("neighbors must be sorted ascending by distance")
    if k > record.probs.shape[0]:
        raise ValueError("more neighbors than vocabulary entries")
    values = np.array([n.value for n in neighbors], dtype=np.int64)
    seen: set[int] = set()
    distinct = np.empty(k, dtype=np.float64)
    for i, v in enumerate(values):
        seen.add(int(v))
        distinct[i] = len(seen)
    conf = np.array([n.key_conf for n in neighbors], dtype=np.float64)
    logp_query = np.log(np.maximum(record.probs[values], PROB_FLOOR))
    logp_key = np.log(np.maximum(conf, PROB_FLOOR))
    top = np.sort(record.probs)[::-1][:k]
    logp_top = np.log(np.maximum(top, PROB_FLOOR))
    return FeatureBundle(dist, distinct, logp_query, logp_key, logp_top)


def _distance_features(params: HeadParams, features: FeatureBundle) -> np.ndarray:
    d = features.distances
    if params.squared_distances:
        d = d * d
    return np.concatenate([d, features.distinct_counts])


def temperature(params: HeadParams, features: FeatureBundle) -> float:
    """Learned positive temperature: softplus of the network output plus a floor."""
    x = _distance_features(params, features)
    a = np.tanh(params.blocks["dist_enc_w"] @ x + params.blocks["dist_enc_b"])
    raw = float(params.blocks["temp_w"] @ a + params.blocks["temp_b"])
    return float(softplus(raw)) + TEMP_FLOOR


def calibration(params: HeadParams, features: FeatureBundle) -> np.ndarray:
    """Per-pair additive calibration from (log query prob, log key confidence)."""
    pair_feats = np.stack([features.logp_query, features.logp_key], axis=1)  # (K, 2)
    a = np.tanh(pair_feats @ params.blocks["conf_enc_w"].T + params.blocks["conf_enc_b"])
    return a @ params.blocks["calib_w"][0] + params.blocks["calib_b"][0]


def knn_distribution(neighbors: Sequence[Neighbor], temp: float, calib: np.ndarray,
                     v_tgt: int, squared: bool = False) -> np.ndarray:
    """Distribution over target tokens induced by the retrieved values.

    Mass exp(-d_k / temp + c_k) accumulates on each neighbor's value; tokens
    never retrieved get exactly zero.
    """
    if temp <= 0:
        raise ValueError("temperature must be positive")
    if len(calib) != len(neighbors):
        raise ValueError("calibration length must match neighbor count")
    dist = np.array([n.distance for n in neighbors], dtype=np.float64)
    if squared:
        dist = dist * dist
    mass = np.exp(-dist / temp + np.asarray(calib, dtype=np.float64))
    total = mass.sum()
    if total == 0.0:
        raise FloatingPointError("all kNN masses underflowed to zero")
    out = np.zeros(v_tgt)
    values = np.fromiter((n.value for n in neighbors), dtype=np.int64, count=len(neighbors))
    np.add.at(out, values, mass)
    return out / total


def lambda_weight(params: HeadParams, features: FeatureBundle) -> tuple[float, float, float]:
    """Mixing weight via a stable two-way softmax of the two scores."""
    x = _distance_features(params, features)
    if params.shared_encoder:
        a_score = np.tanh(params.blocks["dist_enc_w"] @ x + params.blocks["dist_enc_b"])
    else:
        a_score = np.tanh(params.blocks["dist_enc2_w"] @ x + params.blocks["dist_enc2_b"])
    s_knn = float(params.blocks["knn_score_w"] @ a_score + params.blocks["knn_score_b"])
    conf_feats = np.concatenate([features.logp_query, features.logp_key, features.logp_top])
    s_nmt = float(params.blocks["nmt_score_w"] @ conf_feats + params.blocks["nmt_score_b"])
    return float(sigmoid(s_knn - s_nmt)), s_knn, s_nmt


def interpolate(p_knn: np.ndarray, p_base: np.ndarray, lam: float) -> np.ndarray:
    """Convex combination lam * p_knn + (1 - lam) * p_base."""
    if abs(p_knn.sum() - 1.0) > 1e-9 or abs(p_base.sum() - 1.0) > 1e-9:
        raise ValueError("interpolate expects normalized distributions")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda {lam} outside [0, 1]")
    return lam * p_knn + (1.0 - lam) * p_base


def head_forward(variant: str, params: HeadParams, record: ForwardRecord,
                 neighbors: Sequence[Neighbor]) -> InterpolationTrace:
    """Full per-timestep head evaluation producing an InterpolationTrace."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown head variant '{variant}'")
    if variant != params.variant:
        raise ValueError(f"head parameters are for '{params.variant}', not '{variant}'")
    if len(neighbors) != params.k:
        raise ValueError(f"expected {params.k} neighbors, got {len(neighbors)}")
    features = extract_features(record, neighbors)
    if variant == "vanilla":
        temp = params.fixed_temp
        calib = np.zeros(params.k)
        lam, s_knn, s_nmt = params.fixed_lambda, float("nan"), float("nan")
    else:
        temp = temperature(params, features)
        if params.use_calibration:
            calib = calibration(params, features)
        else:
            calib = np.zeros(params.k)
        if params.use_weight_net:
            lam, s_knn, s_nmt = lambda_weight(params, features)
        else:
            lam, s_knn, s_nmt = params.fixed_lambda, float("nan"), float("nan")
    p_knn = knn_distribution(neighbors, temp, calib, record.probs.shape[0],
                             squared=params.squared_distances)
    p_final = interpolate(p_knn, record.probs, lam)
    return InterpolationTrace(features=features, temperature=temp, calib=calib,
                              s_knn=s_knn, s_nmt=s_nmt, lam=lam, p_knn=p_knn,
                              p_base=record.probs, p_final=p_final)


def save_head(params: HeadParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_head(params))


def serialize_head(params: HeadParams) -> bytes:
    head = (HEAD_MAGIC + struct.pack("<I", HEAD_VERSION)
            + struct.pack("<B", _VARIANT_TAGS[params.variant])
            + struct.pack("<III", params.k, params.hidden_wp, params.hidden_dc))
    config = np.array([params.fixed_lambda, params.fixed_temp,
                       float(params.use_calibration), float(params.use_weight_net),
                       float(params.shared_encoder), float(params.squared_distances)])
    body = config.astype("<f8").tobytes()
    body += b"".join(params.blocks[name].astype("<f8").tobytes() for name in _BLOCK_NAMES)
    return head + body


def load_head(path) -> HeadParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != HEAD_MAGIC:
        raise ValueError(f"{path}: not a head checkpoint")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != HEAD_VERSION:
        raise ValueError(f"{path}: unsupported head checkpoint version {version}")
    tag = raw[8]
    if tag not in _TAG_VARIANTS:
        raise ValueError(f"{path}: unknown variant tag {tag}")
    k, h_w, h_c = struct.unpack("<III", raw[9:21])
    shapes = _block_shapes(k, h_w, h_c)
    need = 21 + (len(_CONFIG_SCALARS) + sum(int(np.prod(s)) for s in shapes.values())) * 8
    if len(raw) != need:
        raise ValueError(f"{path}: head checkpoint size mismatch (got {len(raw)}, want {need})")
    config = np.frombuffer(raw, dtype="<f8", count=len(_CONFIG_SCALARS), offset=21)
    off = 21 + len(_CONFIG_SCALARS) * 8
    blocks = {}
    for name in _BLOCK_NAMES:
        shape = shapes[name]
        cnt = int(np.prod(shape))
        blocks[name] = np.frombuffer(raw, dtype="<f8", count=cnt, offset=off).reshape(shape).copy()
        off += cnt * 8
    return HeadParams(_TAG_VARIANTS[tag], k, h_w, h_c,
                      fixed_lambda=float(config[0]), fixed_temp=float(config[1]),
                      use_calibration=bool(config[2]), use_weight_net=bool(config[3]),
                      shared_encoder=bool(config[4]), squared_distances=bool(config[5]),
                      blocks=blocks)
