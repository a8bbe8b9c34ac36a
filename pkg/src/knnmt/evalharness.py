"""Experiment harness: pipeline stages, metrics, pruning/ablation studies.

Every command reads and writes files under the config's output directory with
fixed names, so stages can run independently or via the ``pipeline`` command.
All writes are atomic (temp file + rename) and byte-deterministic given
(config, seed); CSV rows carry a schema tag and an error-marker column.
"""

from __future__ import annotations

import json
import os
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import basemodel, datastore as dstore, knnhead, robusttrain, toytask
from .config import ExperimentConfig
from .headops import batch_eval, batch_features
from .mathcore import derive_seed

VARIANT_ORDER = ("base", "vanilla", "adaptive", "robust")
ABLATION_ORDER = ("full", "no_wp", "no_dc", "no_vector_perturbation",
                  "no_pseudo_pair_perturbation", "no_robust_training", "no_decay")


class StageError(RuntimeError):
    """Raised by pipeline stages; carries the failing stage's name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# artifact layout


def artifact_paths(out_dir: str) -> dict[str, str]:
    c = os.path.join(out_dir, "corpora")
    r = os.path.join(out_dir, "reports")
    h = os.path.join(out_dir, "heads")
    return {
        "corpora_dir": c, "reports_dir": r, "heads_dir": h,
        "general_train": os.path.join(c, "general_train.txt"),
        "general_test": os.path.join(c, "general_test.txt"),
        "indomain_train": os.path.join(c, "indomain_train.txt"),
        "indomain_dev": os.path.join(c, "indomain_dev.txt"),
        "indomain_test": os.path.join(c, "indomain_test.txt"),
        "base_model": os.path.join(out_dir, "base_model.knbm"),
        "datastore": os.path.join(out_dir, "datastore.knds"),
        "tune_vanilla": os.path.join(r, "tune_vanilla.json"),
        "pipeline_csv": os.path.join(r, "pipeline_report.csv"),
        "ablation_csv": os.path.join(r, "ablation.csv"),
        "lambda_csv": os.path.join(r, "lambda_analysis.csv"),
        "prelim_csv": os.path.join(r, "prelim_study.csv"),
    }


def head_path(out_dir: str, name: str) -> str:
    return os.path.join(out_dir, "heads", f"head_{name}.knhd")


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing {path}; run '{hint}' first")
    return path


def _ensure_dirs(out_dir: str) -> None:
    p = artifact_paths(out_dir)
    for d in (out_dir, p["corpora_dir"], p["reports_dir"], p["heads_dir"]):
        os.makedirs(d, exist_ok=True)


# ---------------------------------------------------------------------------
# atomic, deterministic writers


def _atomic_write(path: str, data: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def write_csv(path: str, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    _atomic_write(path, "\n".join(lines) + "\n")


def write_json(path: str, payload: dict) -> None:
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EvalReport:
    variant: str
    datastore_size: int
    tf_accuracy: float
    exact_match: float
    ngram1_precision: float
    ngram2_precision: float
    mean_lambda: float
    gt_retrieval_rate: float


@dataclass
class TeacherForcedStats:
    """Per-timestep arrays from one teacher-forced pass over a corpus."""

    correct: np.ndarray     # bool: argmax(p_final) == y
    lam: np.ndarray         # mixing weight actually used
    confidence: np.ndarray  # base model probability on the reference token
    retrieved: np.ndarray   # bool: reference token among retrieved values

    @property
    def accuracy(self) -> float:
        return float(self.correct.mean())


def teacher_forced_stats(base: basemodel.BaseModelParams,
                         head: knnhead.HeadParams | None,
                         ds: dstore.Datastore, corpus: toytask.Corpus,
                         k: int | None = None) -> TeacherForcedStats:
    src, prev, tgt = basemodel.corpus_timesteps(corpus, base.bos)
    hidden, probs = basemodel.forward_batch(base, src, prev)
    idx, dist = dstore.knn_search_batch(ds, hidden, head.k if head else (k or 1))
    values = ds.values[idx]
    retrieved = (values == tgt[:, None]).any(axis=1)
    conf = probs[np.arange(len(tgt)), tgt]
    if head is None:
        pred = probs.argmax(axis=1)
        lam = np.zeros(len(tgt))
    else:
        feats = batch_features(probs, values, dist, ds.key_conf[idx])
        p_final, _, lam, _ = batch_eval(head, feats, probs)
        pred = p_final.argmax(axis=1)
    return TeacherForcedStats(correct=pred == tgt, lam=lam, confidence=conf,
                              retrieved=retrieved)


def _head_hook(head: knnhead.HeadParams, ds: dstore.Datastore):
    def hook(t: int, record: basemodel.ForwardRecord) -> np.ndarray:
        neighbors = dstore.knn_search(ds, record.hidden, head.k)
        return knnhead.head_forward(head.variant, head, record, neighbors).p_final
    return hook


def _ngram_precision(hyps: list[np.ndarray], refs: list[np.ndarray], n: int) -> float:
    matched = 0
    total = 0
    for hyp, ref in zip(hyps, refs):
        hyp_grams = Counter(tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1))
        ref_grams = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
        matched += sum(min(c, ref_grams[g]) for g, c in hyp_grams.items())
        total += max(len(hyp) - n + 1, 0)
    return matched / total if total else 0.0


def evaluate_variant(base: basemodel.BaseModelParams, head: knnhead.HeadParams | None,
                     ds: dstore.Datastore, corpus: toytask.Corpus,
                     decode: bool = True, k: int | None = None) -> EvalReport:
    """Full evaluation of one variant on a corpus (teacher-forced + greedy)."""
    stats = teacher_forced_stats(base, head, ds, corpus, k=k)
    hook = None if head is None else _head_hook(head, ds)
    if decode:
        hyps = [basemodel.greedy_decode(base, s, hook) for s, _ in corpus.pairs]
        refs = [t for _, t in corpus.pairs]
        exact = float(np.mean([np.array_equal(h, r) for h, r in zip(hyps, refs)]))
        p1 = _ngram_precision(hyps, refs, 1)
        p2 = _ngram_precision(hyps, refs, 2)
    else:
        exact = p1 = p2 = 0.0
    return EvalReport(variant=head.variant if head else "base",
                      datastore_size=len(ds), tf_accuracy=stats.accuracy,
                      exact_match=exact, ngram1_precision=p1, ngram2_precision=p2,
                      mean_lambda=float(stats.lam.mean()),
                      gt_retrieval_rate=float(stats.retrieved.mean()))


# ---------------------------------------------------------------------------
# pipeline stages


def stage_gen_data(cfg: ExperimentConfig) -> None:
    _ensure_dirs(cfg.out_dir)
    p = artifact_paths(cfg.out_dir)
    t = cfg.task
    general, in_domain = toytask.generate_domain_pair(
        derive_seed(cfg.seed, "domains"), t.v_src, t.v_tgt, t.shift_fraction,
        transition_sharpness=t.transition_sharpness)
    lengths = (t.length_min, t.length_max)
    gen_corpus = toytask.sample_corpus(general, t.n_general, lengths,
                                       derive_seed(cfg.seed, "general-corpus"))
    g_train, _, g_test = toytask.split_corpus(gen_corpus, (0.9, 0.0, 0.1))
    in_corpus = toytask.sample_corpus(in_domain, t.n_indomain, lengths,
                                      derive_seed(cfg.seed, "indomain-corpus"))
    i_train, i_dev, i_test = toytask.split_corpus(
        in_corpus, (t.train_ratio, t.dev_ratio, t.test_ratio))
    toytask.save_corpus(g_train, p["general_train"])
    toytask.save_corpus(g_test, p["general_test"])
    toytask.save_corpus(i_train, p["indomain_train"])
    toytask.save_corpus(i_dev, p["indomain_dev"])
    toytask.save_corpus(i_test, p["indomain_test"])


def stage_train_base(cfg: ExperimentConfig) -> basemodel.BaseModelParams:
    p = artifact_paths(cfg.out_dir)
    corpus = toytask.load_corpus(_require(p["general_train"], "gen-data"))
    b = cfg.base_model
    params = basemodel.init_base_params(cfg.task.v_src, cfg.task.v_tgt, b.emb_dim,
                                        b.hidden_dim, seed=derive_seed(cfg.seed, "base-init"))
    trained = basemodel.train_base(params, corpus, b.epochs, b.learning_rate,
                                   seed=derive_seed(cfg.seed, "base-train"),
                                   batch_size=b.batch_size)
    basemodel.save_base_model(trained, p["base_model"])
    return trained


def stage_build_datastore(cfg: ExperimentConfig) -> dstore.Datastore:
    p = artifact_paths(cfg.out_dir)
    base = basemodel.load_base_model(_require(p["base_model"], "train-base"))
    corpus = toytask.load_corpus(_require(p["indomain_train"], "gen-data"))
    ds = dstore.build_datastore(base, corpus)
    dstore.save_datastore(ds, p["datastore"])
    return ds


def stage_tune_vanilla(cfg: ExperimentConfig) -> tuple[float, float]:
    """Grid search of (lambda, temperature) by dev teacher-forced accuracy."""
    p = artifact_paths(cfg.out_dir)
    base = basemodel.load_base_model(_require(p["base_model"], "train-base"))
    ds = dstore.load_datastore(_require(p["datastore"], "build-datastore"))
    dev = toytask.load_corpus(_require(p["indomain_dev"], "gen-data"))
    lambda_grid = [float(x) for x in cfg.eval.lambda_grid]
    temp_grid = [float(x) for x in cfg.eval.temp_grid]
    if not lambda_grid or not temp_grid:
        raise ValueError("tuning grids must be non-empty")

    src, prev, tgt = basemodel.corpus_timesteps(dev, base.bos)
    hidden, probs = basemodel.forward_batch(base, src, prev)
    idx, dist = dstore.knn_search_batch(ds, hidden, cfg.head.k)
    feats = batch_features(probs, ds.values[idx], dist, ds.key_conf[idx])

    best = (-1.0, None, None)
    for lam in lambda_grid:
        for temp in temp_grid:
            probe = knnhead.init_head_params(
                "vanilla", cfg.head.k, seed=0, hidden_wp=cfg.head.hidden_wp,
                hidden_dc=cfg.head.hidden_dc, fixed_lambda=lam, fixed_temp=temp,
                squared_distances=cfg.head.squared_distances)
            p_final, _, _, _ = batch_eval(probe, feats, probs)
            acc = float((p_final.argmax(axis=1) == tgt).mean())
            if acc > best[0]:  # grid order breaks ties: smaller lambda, then temp
                best = (acc, lam, temp)
    acc, lam, temp = best
    tuned = knnhead.init_head_params(
        "vanilla", cfg.head.k, seed=0, hidden_wp=cfg.head.hidden_wp,
        hidden_dc=cfg.head.hidden_dc, fixed_lambda=lam, fixed_temp=temp,
        squared_distances=cfg.head.squared_distances)
    knnhead.save_head(tuned, head_path(cfg.out_dir, "vanilla"))
    write_json(p["tune_vanilla"], {"schema": "tune-vanilla-v1", "seed": cfg.seed,
                                   "lambda": lam, "temperature": temp,
                                   "dev_accuracy": acc})
    return lam, temp


def _train_config(cfg: ExperimentConfig, variant: str, *, key_noise: bool,
                  pseudo_pair: bool, decay: bool, seed_label: str) -> robusttrain.TrainConfig:
    h = cfg.head
    return robusttrain.TrainConfig(
        k=h.k, alpha0=h.alpha0, beta=h.beta, sigma=h.sigma,
        learning_rate=h.learning_rate, batch_size=h.batch_size,
        total_steps=h.total_steps, seed=derive_seed(cfg.seed, seed_label),
        variant=variant, key_noise=key_noise, pseudo_pair=pseudo_pair, decay=decay)


def _tuned_lambda(cfg: ExperimentConfig) -> float:
    p = artifact_paths(cfg.out_dir)
    with open(_require(p["tune_vanilla"], "tune-vanilla"), "r", encoding="utf-8") as fh:
        return float(json.load(fh)["lambda"])


def stage_train_head(cfg: ExperimentConfig, name: str) -> knnhead.HeadParams:
    """Train one head by role name: 'adaptive', 'robust', or an ablation name."""
    p = artifact_paths(cfg.out_dir)
    base = basemodel.load_base_model(_require(p["base_model"], "train-base"))
    ds = dstore.load_datastore(_require(p["datastore"], "build-datastore"))
    dev = toytask.load_corpus(_require(p["indomain_dev"], "gen-data"))
    h = cfg.head

    variant = "adaptive" if name == "adaptive" else "robust"
    use_calibration = name != "no_dc" and variant == "robust"
    use_weight_net = name != "no_wp"
    key_noise = variant == "robust" and cfg.head.key_noise and name not in (
        "no_vector_perturbation", "no_robust_training")
    pseudo_pair = variant == "robust" and cfg.head.pseudo_pair and name not in (
        "no_pseudo_pair_perturbation", "no_robust_training")
    decay = cfg.head.decay and name != "no_decay"
    fixed_lambda = _tuned_lambda(cfg) if name == "no_wp" else 0.5

    head = knnhead.init_head_params(
        variant, h.k, seed=derive_seed(cfg.seed, f"head-init-{name}"),
        hidden_wp=h.hidden_wp, hidden_dc=h.hidden_dc, fixed_lambda=fixed_lambda,
        use_calibration=use_calibration, use_weight_net=use_weight_net,
        shared_encoder=h.shared_encoder, squared_distances=h.squared_distances)
    tcfg = _train_config(cfg, variant, key_noise=key_noise, pseudo_pair=pseudo_pair,
                         decay=decay, seed_label=f"head-train-{name}")
    trained, report = robusttrain.train_head(head, base, ds, dev, tcfg)
    path = head_path(cfg.out_dir, name)
    knnhead.save_head(trained, path)
    report.checkpoint_path = path
    report.save(os.path.join(p["reports_dir"], f"train_report_{name}.txt"))
    return trained


def _load_eval_inputs(cfg: ExperimentConfig, datastore_path: str | None = None):
    p = artifact_paths(cfg.out_dir)
    base = basemodel.load_base_model(_require(p["base_model"], "train-base"))
    ds_path = datastore_path or p["datastore"]
    ds = dstore.load_datastore(_require(ds_path, "build-datastore"))
    test = toytask.load_corpus(_require(p["indomain_test"], "gen-data"))
    return base, ds, test


def _load_head(cfg: ExperimentConfig, variant: str) -> knnhead.HeadParams | None:
    if variant == "base":
        return None
    path = head_path(cfg.out_dir, variant)
    hint = "tune-vanilla" if variant == "vanilla" else f"train-head --variant {variant}"
    return knnhead.load_head(_require(path, hint))


def cmd_eval(cfg: ExperimentConfig, variant: str,
             datastore_path: str | None = None) -> EvalReport:
    base, ds, test = _load_eval_inputs(cfg, datastore_path)
    head = _load_head(cfg, variant)
    report = evaluate_variant(base, head, ds, test, k=cfg.head.k)
    p = artifact_paths(cfg.out_dir)
    payload = {"schema": "eval-v1", "seed": cfg.seed, **asdict(report)}
    write_json(os.path.join(p["reports_dir"], f"eval_{variant}.json"), payload)
    write_csv(os.path.join(p["reports_dir"], f"eval_{variant}.csv"),
              _EVAL_HEADER, [_eval_row(cfg.seed, report)])
    return report


_EVAL_HEADER = ["schema", "seed", "variant", "datastore_size", "tf_accuracy",
                "exact_match", "ngram1_precision", "ngram2_precision",
                "mean_lambda", "gt_retrieval_rate", "error"]


def _eval_row(seed: int, r: EvalReport, schema: str = "eval-v1") -> list:
    return [schema, seed, r.variant, r.datastore_size, r.tf_accuracy, r.exact_match,
            r.ngram1_precision, r.ngram2_precision, r.mean_lambda,
            r.gt_retrieval_rate, ""]


def cmd_pipeline(cfg: ExperimentConfig,
                 variants: tuple[str, ...] = VARIANT_ORDER) -> dict[str, EvalReport]:
    """gen-data -> train-base -> build-datastore -> heads -> evaluation CSV."""
    def run(stage: str, fn):
        try:
            return fn()
        except Exception as exc:
            raise StageError(stage, str(exc)) from exc

    run("gen-data", lambda: stage_gen_data(cfg))
    run("train-base", lambda: stage_train_base(cfg))
    run("build-datastore", lambda: stage_build_datastore(cfg))
    if "vanilla" in variants or "adaptive" in variants or "robust" in variants:
        run("tune-vanilla", lambda: stage_tune_vanilla(cfg))
    for name in ("adaptive", "robust"):
        if name in variants:
            run(f"train-head-{name}", lambda n=name: stage_train_head(cfg, n))
    reports = {}
    rows = []
    for variant in variants:
        reports[variant] = run(f"evaluate-{variant}", lambda v=variant: cmd_eval(cfg, v))
        rows.append(_eval_row(cfg.seed, reports[variant], schema="pipeline-v1"))
    write_csv(artifact_paths(cfg.out_dir)["pipeline_csv"], _EVAL_HEADER, rows)
    return reports


# ---------------------------------------------------------------------------
# studies


def cmd_prune_study(cfg: ExperimentConfig, mode: str,
                    fractions: list[float] | None = None) -> str:
    """Evaluate trained adaptive+robust heads on pruned datastores (no retrain)."""
    if mode not in ("random", "conf-top"):
        raise ValueError(f"unknown prune mode '{mode}'")
    fractions = [float(f) for f in (fractions or cfg.eval.prune_fractions)]
    base, ds, test = _load_eval_inputs(cfg)
    heads = {name: _load_head(cfg, name) for name in ("adaptive", "robust")}
    rows = []
    for frac in fractions:
        if mode == "random":
            pruned = dstore.prune_random(ds, frac, derive_seed(cfg.seed, f"prune-{frac}"))
        else:
            pruned = dstore.prune_confidence_top(ds, frac)
        row = ["prune-v1", cfg.seed, mode, frac, len(pruned)]
        if len(pruned) < cfg.head.k:
            rows.append(row + ["", "", f"pruned datastore below k={cfg.head.k}"])
            continue
        accs = [teacher_forced_stats(base, heads[n], pruned, test).accuracy
                for n in ("adaptive", "robust")]
        rows.append(row + accs + [""])
    path = os.path.join(artifact_paths(cfg.out_dir)["reports_dir"],
                        f"prune_study_{mode}.csv")
    write_csv(path, ["schema", "seed", "mode", "fraction", "size",
                     "adaptive_accuracy", "robust_accuracy", "error"], rows)
    return path


def cmd_prelim_study(cfg: ExperimentConfig,
                     intervals: list[list[float]] | None = None) -> str:
    """Vanilla/adaptive accuracy with confidence-rank intervals removed."""
    intervals = [[float(a), float(b)] for a, b in (intervals or cfg.eval.prelim_intervals)]
    base, ds, test = _load_eval_inputs(cfg)
    heads = {name: _load_head(cfg, name) for name in ("vanilla", "adaptive")}

    def accs(d: dstore.Datastore) -> list[float]:
        return [teacher_forced_stats(base, heads[n], d, test).accuracy
                for n in ("vanilla", "adaptive")]

    rows = [["prelim-v1", cfg.seed, "all", len(ds)] + accs(ds) + [""]]
    rand = dstore.prune_random(ds, 0.2, derive_seed(cfg.seed, "prelim-random"))
    rows.append(["prelim-v1", cfg.seed, "random-20", len(rand)] + accs(rand) + [""])
    for lo, hi in intervals:
        label = f"interval-{lo:g}-{hi:g}"
        try:
            pruned = dstore.prune_confidence_interval(ds, lo, hi)
        except ValueError as exc:
            rows.append(["prelim-v1", cfg.seed, label, "", "", "", str(exc)])
            continue
        if len(pruned) < cfg.head.k:
            rows.append(["prelim-v1", cfg.seed, label, len(pruned), "", "",
                         f"pruned datastore below k={cfg.head.k}"])
            continue
        rows.append(["prelim-v1", cfg.seed, label, len(pruned)] + accs(pruned) + [""])
    path = artifact_paths(cfg.out_dir)["prelim_csv"]
    write_csv(path, ["schema", "seed", "strategy", "size", "vanilla_accuracy",
                     "adaptive_accuracy", "error"], rows)
    return path


def cmd_lambda_analysis(cfg: ExperimentConfig, bins: list[float] | None = None,
                        variant: str = "robust") -> str:
    """Mean mixing weight per confidence bin, split by ground-truth retrieval."""
    edges = [float(b) for b in (bins or cfg.eval.confidence_bins)]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bins must be strictly increasing with at least two edges")
    base, ds, test = _load_eval_inputs(cfg)
    head = _load_head(cfg, variant)
    if head is None:
        raise ValueError("lambda analysis needs a retrieval head variant")
    stats = teacher_forced_stats(base, head, ds, test)
    which = np.clip(np.searchsorted(edges, stats.confidence, side="right") - 1,
                    0, len(edges) - 2)
    rows = []
    for b in range(len(edges) - 1):
        for bucket, mask_bucket in (("retrieved", stats.retrieved),
                                    ("missed", ~stats.retrieved)):
            mask = (which == b) & mask_bucket
            count = int(mask.sum())
            mean_lam = float(stats.lam[mask].mean()) if count else ""
            rows.append(["lambda-v1", cfg.seed, variant, edges[b], edges[b + 1],
                         bucket, count, mean_lam, ""])
    path = artifact_paths(cfg.out_dir)["lambda_csv"]
    write_csv(path, ["schema", "seed", "variant", "bin_lo", "bin_hi", "bucket",
                     "count", "mean_lambda", "error"], rows)
    return path


def cmd_ablate(cfg: ExperimentConfig) -> str:
    """Train and evaluate the full robust head plus its six ablations."""
    base, ds, test = _load_eval_inputs(cfg)
    rows = []
    for name in ABLATION_ORDER:
        head_name = "robust" if name == "full" else name
        if name == "full":
            path = head_path(cfg.out_dir, "robust")
            head = (knnhead.load_head(path) if os.path.exists(path)
                    else stage_train_head(cfg, "robust"))
        else:
            head = stage_train_head(cfg, head_name)
        report = evaluate_variant(base, head, ds, test)
        row = _eval_row(cfg.seed, report, schema="ablation-v1")
        row[2] = name  # label rows by ablation, not by head variant
        rows.append(row)
    path = artifact_paths(cfg.out_dir)["ablation_csv"]
    write_csv(path, _EVAL_HEADER, rows)
    return path
