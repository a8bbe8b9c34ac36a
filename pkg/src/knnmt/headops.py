"""Vectorized head evaluation and hand-derived gradients over timestep batches.

Training and the experiment harness run thousands of head evaluations per
second, so the per-timestep path in ``knnhead`` is mirrored here on (B, K)
arrays. ``tests/test_knnhead.py`` pins the two paths to each other at 1e-12.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .knnhead import PROB_FLOOR, TEMP_FLOOR, HeadParams
from .mathcore import sigmoid, softplus


@dataclass
class BatchFeatures:
    """Per-timestep retrieval features stacked over a batch."""

    distances: np.ndarray   # (B, K) ascending rows
    distinct: np.ndarray    # (B, K)
    logp_query: np.ndarray  # (B, K)
    logp_key: np.ndarray    # (B, K)
    logp_top: np.ndarray    # (B, K)
    values: np.ndarray      # (B, K) int64


def batch_features(probs: np.ndarray, values: np.ndarray, distances: np.ndarray,
                   key_conf: np.ndarray) -> BatchFeatures:
    """Features for B timesteps at once. ``probs`` is (B, V_t), rest (B, K)."""
    b, k = values.shape
    rows = np.arange(b)[:, None]
    first_seen = np.ones((b, k), dtype=bool)
    for j in range(1, k):
        first_seen[:, j] = ~(values[:, :j] == values[:, j:j + 1]).any(axis=1)
    distinct = np.cumsum(first_seen, axis=1).astype(np.float64)
    logp_query = np.log(np.maximum(probs[rows, values], PROB_FLOOR))
    logp_key = np.log(np.maximum(key_conf, PROB_FLOOR))
    top = -np.sort(-probs, axis=1)[:, :k]
    logp_top = np.log(np.maximum(top, PROB_FLOOR))
    return BatchFeatures(distances.astype(np.float64), distinct,
                         logp_query, logp_key, logp_top, values.astype(np.int64))


@dataclass
class _Cache:
    dr: np.ndarray
    a2: np.ndarray | None
    a2_score: np.ndarray | None
    t_raw: np.ndarray | None
    temp: np.ndarray
    pair_feats: np.ndarray | None
    a4: np.ndarray | None
    calib: np.ndarray
    conf_feats: np.ndarray | None
    s_knn: np.ndarray | None
    s_nmt: np.ndarray | None
    lam: np.ndarray
    mass: np.ndarray
    mass_total: np.ndarray
    d_used: np.ndarray


def _core(params: HeadParams, feats: BatchFeatures) -> _Cache:
    blk = params.blocks
    b = feats.distances.shape[0]
    d_used = feats.distances ** 2 if params.squared_distances else feats.distances
    dr = np.concatenate([d_used, feats.distinct], axis=1)

    if params.variant == "vanilla":
        temp = np.full(b, params.fixed_temp)
        calib = np.zeros_like(feats.distances)
        lam = np.full(b, params.fixed_lambda)
        cache = _Cache(dr, None, None, None, temp, None, None, calib, None,
                       None, None, lam, np.empty(0), np.empty(0), d_used)
    else:
        a2 = np.tanh(dr @ blk["dist_enc_w"].T + blk["dist_enc_b"])
        t_raw = a2 @ blk["temp_w"][0] + blk["temp_b"][0]
        temp = softplus(t_raw) + TEMP_FLOOR
        if params.use_calibration:
            pair_feats = np.stack([feats.logp_query, feats.logp_key], axis=2)
            a4 = np.tanh(pair_feats @ blk["conf_enc_w"].T + blk["conf_enc_b"])
            calib = a4 @ blk["calib_w"][0] + blk["calib_b"][0]
        else:
            pair_feats = a4 = None
            calib = np.zeros_like(feats.distances)
        if params.use_weight_net:
            if params.shared_encoder:
                a2_score = a2
            else:
                a2_score = np.tanh(dr @ blk["dist_enc2_w"].T + blk["dist_enc2_b"])
            s_knn = a2_score @ blk["knn_score_w"][0] + blk["knn_score_b"][0]
            conf_feats = np.concatenate([feats.logp_query, feats.logp_key, feats.logp_top], axis=1)
            s_nmt = conf_feats @ blk["nmt_score_w"][0] + blk["nmt_score_b"][0]
            lam = sigmoid(s_knn - s_nmt)
        else:
            a2_score = conf_feats = s_knn = s_nmt = None
            lam = np.full(b, params.fixed_lambda)
        cache = _Cache(dr, a2, a2_score, t_raw, temp, pair_feats, a4, calib,
                       conf_feats, s_knn, s_nmt, lam, np.empty(0), np.empty(0), d_used)

    cache.mass = np.exp(-d_used / cache.temp[:, None] + cache.calib)
    cache.mass_total = cache.mass.sum(axis=1)
    if np.any(cache.mass_total == 0.0):
        raise FloatingPointError("all kNN masses underflowed to zero")
    return cache


def batch_eval(params: HeadParams, feats: BatchFeatures, p_base: np.ndarray
               ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Dense final distributions for a batch.

    Returns (p_final (B, V_t), p_knn (B, V_t), lam (B,), temp (B,)).
    """
    cache = _core(params, feats)
    b, v_tgt = p_base.shape
    p_knn = np.zeros((b, v_tgt))
    rows = np.broadcast_to(np.arange(b)[:, None], feats.values.shape)
    np.add.at(p_knn, (rows, feats.values), cache.mass)
    p_knn /= cache.mass_total[:, None]
    lam = cache.lam
    p_final = lam[:, None] * p_knn + (1.0 - lam[:, None]) * p_base
    return p_final, p_knn, lam, cache.temp


def batch_loss(params: HeadParams, feats: BatchFeatures, p_base_y: np.ndarray,
               y: np.ndarray) -> float:
    """Mean negative log-likelihood of the interpolated distribution."""
    loss, _ = _loss_core(params, feats, p_base_y, y, _core(params, feats))
    return loss


def _loss_core(params: HeadParams, feats: BatchFeatures, p_base_y: np.ndarray,
               y: np.ndarray, cache: _Cache):
    match = feats.values == y[:, None]
    mass_y = (cache.mass * match).sum(axis=1)
    p_knn_y = mass_y / cache.mass_total
    final_y = cache.lam * p_knn_y + (1.0 - cache.lam) * p_base_y
    loss = float(-np.log(np.maximum(final_y, PROB_FLOOR)).mean())
    return loss, (match, p_knn_y, final_y)


def batch_loss_and_grads(params: HeadParams, feats: BatchFeatures,
                         p_base_y: np.ndarray, y: np.ndarray
                         ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean NLL and analytic gradients for the variant's trainable blocks."""
    cache = _core(params, feats)
    loss, (match, p_knn_y, final_y) = _loss_core(params, feats, p_base_y, y, cache)
    trainable = params.trainable_block_names()
    if not trainable:
        return loss, {}
    blk = params.blocks
    b = y.shape[0]

    live = final_y > PROB_FLOOR  # below the floor the loss is constant
    d_final = np.where(live, -1.0 / np.maximum(final_y, PROB_FLOOR), 0.0) / b
    d_lam = d_final * (p_knn_y - p_base_y)
    d_pknn_y = d_final * cache.lam

    d_mass = (d_pknn_y / cache.mass_total)[:, None] * (match - p_knn_y[:, None])
    d_expo = d_mass * cache.mass                      # (B, K)
    d_temp = (d_expo * cache.d_used).sum(axis=1) / cache.temp ** 2
    d_t_raw = d_temp * sigmoid(cache.t_raw)

    grads: dict[str, np.ndarray] = {}
    grads["temp_w"] = (d_t_raw @ cache.a2)[None, :]
    grads["temp_b"] = np.array([d_t_raw.sum()])
    d_a2 = d_t_raw[:, None] * blk["temp_w"][0]

    if params.use_weight_net:
        d_delta = d_lam * cache.lam * (1.0 - cache.lam)
        d_s_knn = d_delta
        d_s_nmt = -d_delta
        grads["knn_score_w"] = (d_s_knn @ cache.a2_score)[None, :]
        grads["knn_score_b"] = np.array([d_s_knn.sum()])
        grads["nmt_score_b"] = np.array([d_s_nmt.sum()])
        if "nmt_score_w" in trainable:
            grads["nmt_score_w"] = (d_s_nmt @ cache.conf_feats)[None, :]
        d_a2_score = d_s_knn[:, None] * blk["knn_score_w"][0]
        if params.shared_encoder:
            d_a2 = d_a2 + d_a2_score
        else:
            d_z2b = d_a2_score * (1.0 - cache.a2_score ** 2)
            grads["dist_enc2_w"] = d_z2b.T @ cache.dr
            grads["dist_enc2_b"] = d_z2b.sum(axis=0)

    d_z2 = d_a2 * (1.0 - cache.a2 ** 2)
    grads["dist_enc_w"] = d_z2.T @ cache.dr
    grads["dist_enc_b"] = d_z2.sum(axis=0)

    if "calib_w" in trainable:
        d_calib = d_expo
        grads["calib_w"] = np.einsum("bk,bkh->h", d_calib, cache.a4)[None, :]
        grads["calib_b"] = np.array([d_calib.sum()])
        d_a4 = d_calib[:, :, None] * blk["calib_w"][0]
        d_z4 = d_a4 * (1.0 - cache.a4 ** 2)
        grads["conf_enc_w"] = np.einsum("bkh,bkf->hf", d_z4, cache.pair_feats)
        grads["conf_enc_b"] = d_z4.sum(axis=(0, 1))

    return loss, {name: grads[name] for name in trainable}
