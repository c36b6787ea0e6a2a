"""Experiment driver: pretrain -> finetune protocol, evaluation, and the
method x direction results matrix.

Every run is deterministic given its config (data generation, parameter
init, batch and negative sampling all derive from the config seed), so two
invocations with identical configs produce byte-identical results.csv and
checkpoints. torch is pinned to one thread for bit-stable reductions.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import adapt, model as model_mod, synthdata
from .adapt import (AttributeHead, DomainClassifier, LsdConfig, cdan_objective,
                    dann_objective, init_attribute_head, init_domain_classifier, srda_lsd)
from .config import BOUND_KEYS, DIRECTIONS, METHODS, ConfigError, ExperimentConfig, config_hash
from .diffcore import ParameterStore, load_checkpoint, make_optimizer, save_checkpoint
from .model import BatchScorer, ModelDims, RegParams, init_reg_params
from .synthdata import Dataset, default_domain_pair, generate_domain, split, subsample, swap_pair
from .vocab import UNK_TOKEN, VocabPartition, partition_vocab

logger = logging.getLogger(__name__)

RESULT_SPLITS = ("source_val", "target_val", "target_test")


class DivergenceError(RuntimeError):
    """Training loss became non-finite (CLI exit code 3)."""

    def __init__(self, iteration: int, last_good: ParameterStore):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.last_good = last_good


_threads_pinned = False


def _pin_threads() -> None:
    global _threads_pinned
    if not _threads_pinned:
        torch.set_num_threads(1)
        _threads_pinned = True


# ---------------------------------------------------------------------------
# Data and model assembly
# ---------------------------------------------------------------------------

@dataclass
class DataBundle:
    source_train: Dataset
    source_val: Dataset
    source_test: Dataset
    target_train: Dataset
    target_val: Dataset
    target_test: Dataset
    target_tune: Dataset          # the labeled finetuning slice
    partition: VocabPartition
    categories: tuple[str, ...]


def build_datasets(cfg: ExperimentConfig) -> DataBundle:
    source_spec, target_spec = default_domain_pair(
        cfg.seed,
        source_expressions=cfg.source_expressions, source_scenes=cfg.source_scenes,
        target_expressions=cfg.target_expressions, target_scenes=cfg.target_scenes,
        target_rotation_deg=cfg.target_rotation_deg,
        target_offset_scale=cfg.target_offset_scale,
        noise_scale=cfg.noise_scale, variant_usage=cfg.variant_usage,
        n_target_variant_categories=cfg.n_target_variant_categories,
        n_source_variant_categories=cfg.n_source_variant_categories,
    )
    if cfg.direction == "tgt2src":
        source_spec, target_spec = swap_pair(source_spec, target_spec)
    source = generate_domain(source_spec, seed=cfg.seed * 7919 + 13)
    target = generate_domain(target_spec, seed=cfg.seed * 7919 + 17)
    fr = (cfg.split_train, cfg.split_val, cfg.split_test)
    s_train, s_val, s_test = split(source, fr, seed=cfg.seed + 101)
    t_train, t_val, t_test = split(target, fr, seed=cfg.seed + 102)
    tune = subsample(t_train, cfg.target_fraction, seed=cfg.seed + 103)
    partition = partition_vocab(source.vocabulary | {UNK_TOKEN},
                                target.vocabulary | {UNK_TOKEN})
    categories = tuple(sorted(set(source.categories) | set(target.categories)))
    return DataBundle(s_train, s_val, s_test, t_train, t_val, t_test, tune,
                      partition, categories)


@dataclass
class ModelBundle:
    store: ParameterStore
    params: RegParams
    classifiers: list[tuple[str, DomainClassifier]] = field(default_factory=list)
    attr_head: AttributeHead | None = None


def model_dims(cfg: ExperimentConfig) -> ModelDims:
    return ModelDims(d=cfg.embed_dim, h=cfg.hidden_dim, d_obj=cfg.obj_feature_dim,
                     d_gnn=cfg.gnn_dim, M=cfg.graph_neighbors,
                     hop_cap=cfg.graph_hop_cap if cfg.graph_hop_cap >= 0 else None)


def backbone_method(method: str) -> str:
    return "none" if method in BOUND_KEYS else method


def _torch_dtype(cfg: ExperimentConfig) -> torch.dtype:
    return torch.float32 if cfg.dtype == "float32" else torch.float64


def init_model(cfg: ExperimentConfig, partition: VocabPartition,
               categories: tuple[str, ...]) -> ModelBundle:
    """Initialize the backbone plus the method's adaptation heads.

    The backbone draws from one rng stream and heads from another, so the
    backbone initialization is identical across methods for a given seed.
    """
    method = backbone_method(cfg.method)
    store = ParameterStore(rng_seed=cfg.seed, dtype=_torch_dtype(cfg))
    rng = np.random.default_rng(cfg.seed + 1000)
    params = init_reg_params(store, partition, model_dims(cfg), rng,
                             attention_enabled=(method == "relxfer"),
                             margin=cfg.margin, lam1=cfg.loss_lambda1, lam2=cfg.loss_lambda2)
    bundle = ModelBundle(store=store, params=params)
    head_rng = np.random.default_rng(cfg.seed + 2000)
    lang_dim = 4 * cfg.hidden_dim
    if method in ("dann_lang", "dann_both"):
        bundle.classifiers.append(("language", init_domain_classifier(
            store, lang_dim, cfg.adv_hidden, "language", cfg.adv_lambda, head_rng, "adapt.lang")))
    if method in ("dann_vis", "dann_both"):
        bundle.classifiers.append(("visual", init_domain_classifier(
            store, cfg.embed_dim, cfg.adv_hidden, "visual", cfg.adv_lambda, head_rng, "adapt.vis")))
    if method == "adv_cat":
        bundle.classifiers.append(("concat", init_domain_classifier(
            store, cfg.embed_dim + lang_dim, cfg.adv_hidden, "concat", cfg.adv_lambda,
            head_rng, "adapt.cat")))
    if method == "cdan":
        n_cat = len(categories)
        if cfg.embed_dim * n_cat > adapt.MAX_CONDITIONED_DIM:
            raise ConfigError("conditioned feature dimension too large for cdan")
        bundle.attr_head = init_attribute_head(store, cfg.embed_dim, n_cat, head_rng)
        bundle.classifiers.append(("cdan", init_domain_classifier(
            store, cfg.embed_dim * n_cat, cfg.adv_hidden, "visual", cfg.adv_lambda,
            head_rng, "adapt.cdan")))
    return bundle


def params_from_store(store: ParameterStore, partition: VocabPartition, dims: ModelDims,
                      attention_enabled: bool, margin: float = 0.1,
                      lam1: float = 1.0, lam2: float = 1.0) -> RegParams:
    """Wire an existing store's tensors back into parameter views."""
    from .gnn import GnnParams
    from .language import LanguageParams
    from .vocab import CrossAttentionEmbedding

    emb = CrossAttentionEmbedding(
        partition=partition, d=dims.d,
        shared=store.get("vocab.shared"),
        src_private=store.get("vocab.src_private"),
        tgt_private=store.get("vocab.tgt_private"),
        attn_src=store.get("vocab.attn_src"),
        attn_tgt=store.get("vocab.attn_tgt"),
        attention_enabled=attention_enabled,
    )
    lang = LanguageParams(**{f.name: store.get(f"lang.{f.name}")
                             for f in dataclasses.fields(LanguageParams)})
    gnn = GnnParams(**{f.name: store.get(f"gnn.{f.name}")
                       for f in dataclasses.fields(GnnParams)})
    return RegParams(
        dims=dims, emb=emb, lang=lang,
        subj_w1=store.get("subj.w1"), subj_b1=store.get("subj.b1"),
        subj_w2=store.get("subj.w2"), subj_b2=store.get("subj.b2"),
        loc_weight=store.get("loc.weight"), loc_bias=store.get("loc.bias"),
        gnn=gnn, margin=margin, lam1=lam1, lam2=lam2,
    )


def checkpoint_meta(cfg: ExperimentConfig, bundle: ModelBundle, phase: str) -> dict:
    p = bundle.params.emb.partition
    return {
        "phase": phase,
        "method": cfg.method,
        "direction": cfg.direction,
        "config_hash": config_hash(cfg),
        "attention_enabled": bundle.params.emb.attention_enabled,
        "vocab_shared": p.shared,
        "vocab_source_private": p.source_private,
        "vocab_target_private": p.target_private,
    }


def params_from_checkpoint(path, cfg: ExperimentConfig) -> tuple[ParameterStore, RegParams, dict]:
    store, meta = load_checkpoint(path, dtype=_torch_dtype(cfg))
    partition = VocabPartition(shared=list(meta["vocab_shared"]),
                               source_private=list(meta["vocab_source_private"]),
                               target_private=list(meta["vocab_target_private"]))
    params = params_from_store(store, partition, model_dims(cfg),
                               attention_enabled=bool(meta["attention_enabled"]),
                               margin=cfg.margin, lam1=cfg.loss_lambda1, lam2=cfg.loss_lambda2)
    return store, params, meta


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainOutcome:
    series: list[tuple[int, float]]
    skipped: int


def _log_points(iterations: int, eval_every: int) -> list[int]:
    window = min(10 * eval_every, iterations)
    pts = {it for it in range(0, window + 1, eval_every) if it <= iterations}
    pts.add(iterations)
    return sorted(pts)


def _sample_negatives(ds: Dataset, scene_pool: dict[int, list[int]], pos_idx: int,
                      k: int, rng: np.random.Generator) -> list[int]:
    """Indices of up to k expressions describing other objects.

    Same-scene expressions are preferred; the remainder comes from random
    other samples (rejecting the positive's referent and duplicate token
    sequences).
    """
    pos = ds.samples[pos_idx]
    pool = [j for j in scene_pool.get(pos.scene_id, ())
            if j != pos_idx and ds.samples[j].target_object_id != pos.target_object_id]
    take = min(k, len(pool))
    picked = [pool[int(j)] for j in rng.choice(len(pool), size=take, replace=False)] if take else []
    if len(picked) < k and len(ds.samples) > 1:
        tries = rng.choice(len(ds.samples), size=min(len(ds.samples), 8 * k), replace=False)
        for j in tries:
            j = int(j)
            if len(picked) >= k:
                break
            cand = ds.samples[j]
            if j == pos_idx or j in picked or cand.tokens == pos.tokens:
                continue
            if cand.scene_id == pos.scene_id and cand.target_object_id == pos.target_object_id:
                continue
            picked.append(j)
    return picked


class Trainer:
    """One training stage (pretrain or finetune) over a fixed dataset."""

    def __init__(self, cfg: ExperimentConfig, bundle: ModelBundle, data: DataBundle,
                 train_ds: Dataset, eval_ds: Dataset, mode: str, lr: float,
                 adapt_method: str, rng: np.random.Generator):
        self.cfg = cfg
        self.bundle = bundle
        self.data = data
        self.train_ds = train_ds
        self.eval_ds = eval_ds
        self.mode = mode
        self.adapt_method = adapt_method
        self.rng = rng
        self.optimizer = make_optimizer(cfg.optimizer, lr)
        self.scorer = BatchScorer(bundle.params)
        self.eval_scorer = BatchScorer(bundle.params, unk_token=UNK_TOKEN)
        self.skipped = 0
        self._scene_pool: dict[int, list[int]] = {}
        for j, s in enumerate(train_ds.samples):
            self._scene_pool.setdefault(s.scene_id, []).append(j)
        self._tgt_pool = data.target_train.samples
        self._cat_index = {c: i for i, c in enumerate(data.categories)}

    def evaluate(self) -> float:
        return model_mod.accuracy(self.bundle.params, self.eval_ds, self.mode, self.eval_scorer)

    def _hinge_and_features(self):
        """One batch: hinge loss plus the feature taps adaptation needs."""
        cfg = self.cfg
        ds = self.train_ds
        params = self.bundle.params
        n = len(ds.samples)
        take = min(cfg.batch_size, n)
        pos_idx = [int(i) for i in self.rng.choice(n, size=take, replace=False)]

        expressions: list[list[str]] = []
        expr_of: dict[int, int] = {}

        def expr_slot(sample_idx: int) -> int:
            if sample_idx not in expr_of:
                expr_of[sample_idx] = len(expressions)
                expressions.append(ds.samples[sample_idx].tokens)
            return expr_of[sample_idx]

        pairs: list[tuple[int, synthdata.Scene, int]] = []
        layout = []   # per positive: (pos_pair, [negobj_pairs], [negexpr_pairs])
        for i in pos_idx:
            sample = ds.samples[i]
            scene = ds.scene(sample.scene_id)
            e = expr_slot(i)
            p_pos = len(pairs)
            pairs.append((e, scene, sample.target_object_id))
            others = [o.id for o in scene.objects if o.id != sample.target_object_id]
            k = min(cfg.negatives_per_kind, len(others))
            neg_obj = [others[int(j)] for j in self.rng.choice(len(others), size=k, replace=False)] if k else []
            p_negobj = []
            for oid in neg_obj:
                p_negobj.append(len(pairs))
                pairs.append((e, scene, oid))
            p_negexpr = []
            for j in _sample_negatives(ds, self._scene_pool, i, cfg.negatives_per_kind, self.rng):
                p_negexpr.append(len(pairs))
                pairs.append((expr_slot(j), scene, sample.target_object_id))
            if not p_negobj and not p_negexpr:
                self.skipped += 1
            layout.append((p_pos, p_negobj, p_negexpr))

        encoded = self.scorer.encode(expressions, params.emb.active_domain())
        batch = self.scorer.score_pairs(encoded, pairs)
        s = batch.overall
        margin = params.margin
        terms = []
        for p_pos, p_negobj, p_negexpr in layout:
            s_pos = s[p_pos]
            part = torch.tensor(0.0, dtype=params.dtype)
            if p_negexpr:
                neg = torch.stack([torch.clamp(margin + s[j] - s_pos, min=0.0) for j in p_negexpr])
                part = part + params.lam1 * neg.mean()
            if p_negobj:
                neg = torch.stack([torch.clamp(margin + s[j] - s_pos, min=0.0) for j in p_negobj])
                part = part + params.lam2 * neg.mean()
            terms.append(part)
        task_loss = torch.stack(terms).mean()

        pos_pairs = [lay[0] for lay in layout]
        feats = {
            "vis_src": batch.subj_feat[pos_pairs],
            "lang_src": encoded.summary[[expr_of[i] for i in pos_idx]],
            "pos_categories": [ds.scene(ds.samples[i].scene_id)
                               .object_by_id(ds.samples[i].target_object_id).category
                               for i in pos_idx],
        }
        return task_loss, feats

    def _target_features(self, need_lang: bool, need_qsub: bool):
        """Unlabeled-target feature taps: random objects plus expression encodings."""
        cfg = self.cfg
        pool = self._tgt_pool
        take = min(cfg.batch_size, len(pool))
        idx = [int(i) for i in self.rng.choice(len(pool), size=take, replace=False)]
        samples = [pool[i] for i in idx]
        rows = []
        for s in samples:
            scene = self.data.target_train.scene(s.scene_id)
            obj = scene.objects[int(self.rng.integers(0, len(scene.objects)))]
            rows.append(np.asarray(obj.feature, dtype=np.float64))
        vis = self.scorer.subject_features(np.stack(rows))
        lang = q_sub = None
        if need_lang or need_qsub:
            encoded = self.scorer.encode([s.tokens for s in samples], "target")
            lang = encoded.summary
            q_sub = encoded.q_sub
        return vis, lang, q_sub

    def _objective(self, iteration: int, total_iterations: int) -> torch.Tensor:
        task_loss, feats = self._hinge_and_features()
        method = self.adapt_method
        if method in ("none", "relxfer"):
            return task_loss
        bundle = self.bundle
        if method in ("dann_lang", "dann_vis", "dann_both", "adv_cat"):
            need_lang = method in ("dann_lang", "dann_both", "adv_cat")
            vis_t, lang_t, _ = self._target_features(need_lang, False)
            pairs = []
            for placement, clf in bundle.classifiers:
                if placement == "language":
                    pairs.append((clf, feats["lang_src"], lang_t))
                elif placement == "visual":
                    pairs.append((clf, feats["vis_src"], vis_t))
                else:
                    src = torch.cat([feats["vis_src"], feats["lang_src"]], dim=1)
                    tgt = torch.cat([vis_t, lang_t], dim=1)
                    pairs.append((clf, src, tgt))
            total, _ = dann_objective(task_loss, pairs)
            return total
        if method == "cdan":
            vis_t, _, _ = self._target_features(False, False)
            labels = torch.tensor([self._cat_index[c] for c in feats["pos_categories"]],
                                  dtype=torch.long)
            clf = bundle.classifiers[0][1]
            total, _, _ = cdan_objective(task_loss, clf, bundle.attr_head,
                                         feats["vis_src"], vis_t, labels,
                                         attr_weight=self.cfg.attr_weight)
            return total
        if method == "srda":
            if iteration < self.cfg.srda_warmup_frac * total_iterations:
                return task_loss
            vis_t, _, q_sub = self._target_features(False, True)
            q_const = q_sub.detach()

            def score_fn(f):
                return model_mod.cosine_rows(f, q_const)

            lsd = srda_lsd(vis_t, score_fn,
                           LsdConfig(eps=self.cfg.srda_eps, mode=self.cfg.srda_mode),
                           self.rng)
            return task_loss + self.cfg.srda_weight * lsd
        raise ConfigError(f"unknown method {method!r}")

    def run(self, iterations: int) -> TrainOutcome:
        _pin_threads()
        params = self.bundle.params
        params.emb.set_mode(self.mode)
        store = self.bundle.store
        points = set(_log_points(iterations, self.cfg.eval_every))
        series = []
        last_good = store.clone()
        for it in range(iterations):
            if it in points:
                series.append((it, self.evaluate()))
                last_good = store.clone()
            loss = self._objective(it, iterations)
            if not torch.isfinite(loss):
                raise DivergenceError(it, last_good)
            store.zero_grads()
            loss.backward()
            grads = {name: t.grad for name, t in store.items() if t.grad is not None}
            self.optimizer.step(store, grads)
        store.zero_grads()
        series.append((iterations, self.evaluate()))
        return TrainOutcome(series=series, skipped=self.skipped)


# ---------------------------------------------------------------------------
# Protocol stages
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    method: str
    direction: str
    seed: int
    accuracies: dict[str, float]
    series: list[tuple[int, float]]
    all_series: dict[str, list[tuple[int, float]]]
    chosen_multiplier: float
    wallclock_s: float
    config_hash: str
    status: str = "ok"
    skipped: int = 0

    def to_json(self) -> str:
        payload = dataclasses.asdict(self)
        return json.dumps(payload, sort_keys=True, indent=2)


def _final_accuracies(params: RegParams, data: DataBundle) -> dict[str, float]:
    """All three result splits, measured on the current parameters."""
    return {
        "source_val": model_mod.accuracy(params, data.source_val, "pretrain"),
        "target_val": model_mod.accuracy(params, data.target_val, "finetune"),
        "target_test": model_mod.accuracy(params, data.target_test, "finetune"),
    }


def pretrain(cfg: ExperimentConfig, data: DataBundle | None = None,
             ) -> tuple[ModelBundle, DataBundle, RunResult]:
    """Stage 1: train on the source domain with the method's adaptation term."""
    _pin_threads()
    if cfg.method in BOUND_KEYS:
        raise ConfigError(f"{cfg.method!r} is a matrix bound key, not a pretraining method")
    start = time.perf_counter()
    if data is None:
        data = build_datasets(cfg)
    bundle = init_model(cfg, data.partition, data.categories)
    trainer = Trainer(cfg, bundle, data, data.source_train, data.source_val,
                      mode="pretrain", lr=cfg.base_lr, adapt_method=backbone_method(cfg.method),
                      rng=np.random.default_rng([cfg.seed, 1]))
    outcome = trainer.run(cfg.pretrain_iterations)
    acc = {"source_val": outcome.series[-1][1]}
    result = RunResult(method=cfg.method, direction=cfg.direction, seed=cfg.seed,
                       accuracies=acc, series=outcome.series,
                       all_series={"pretrain": outcome.series},
                       chosen_multiplier=1.0,
                       wallclock_s=time.perf_counter() - start,
                       config_hash=config_hash(cfg), skipped=outcome.skipped)
    return bundle, data, result


def finetune(bundle: ModelBundle, cfg: ExperimentConfig, data: DataBundle,
             tune_ds: Dataset | None = None) -> tuple[ModelBundle, RunResult]:
    """Stage 2: sweep the three finetuning learning rates on the target slice.

    Each sweep leg starts from a fresh copy of the pretrained parameters;
    the leg with the best final target-val accuracy is kept (ties -> the
    larger multiplier, i.e. the first in the sweep order).
    """
    _pin_threads()
    start = time.perf_counter()
    tune_ds = tune_ds if tune_ds is not None else data.target_tune
    attention = bundle.params.emb.attention_enabled
    best = None
    all_series: dict[str, list[tuple[int, float]]] = {}
    for mi, mult in enumerate(cfg.finetune_lr_multipliers):
        store = bundle.store.clone()
        params = params_from_store(store, bundle.params.emb.partition, model_dims(cfg),
                                   attention_enabled=attention, margin=cfg.margin,
                                   lam1=cfg.loss_lambda1, lam2=cfg.loss_lambda2)
        leg_bundle = ModelBundle(store=store, params=params)
        trainer = Trainer(cfg, leg_bundle, data, tune_ds, data.target_val,
                          mode="finetune", lr=cfg.base_lr * mult, adapt_method="none",
                          rng=np.random.default_rng([cfg.seed, 2, mi]))
        outcome = trainer.run(cfg.finetune_iterations)
        all_series[f"{mult:g}"] = outcome.series
        final_acc = outcome.series[-1][1]
        if best is None or final_acc > best[0]:
            best = (final_acc, mult, leg_bundle, outcome)
    _, mult, leg_bundle, outcome = best
    acc = _final_accuracies(leg_bundle.params, data)
    result = RunResult(method=cfg.method, direction=cfg.direction, seed=cfg.seed,
                       accuracies=acc, series=outcome.series, all_series=all_series,
                       chosen_multiplier=mult, wallclock_s=time.perf_counter() - start,
                       config_hash=config_hash(cfg), skipped=outcome.skipped)
    return leg_bundle, result


def train_on_target(cfg: ExperimentConfig, data: DataBundle | None = None,
                    full: bool = False) -> tuple[ModelBundle, DataBundle, RunResult]:
    """Lower-bound runs: train from scratch on target data only."""
    _pin_threads()
    start = time.perf_counter()
    if data is None:
        data = build_datasets(cfg)
    bundle = init_model(cfg, data.partition, data.categories)
    train_ds = data.target_train if full else data.target_tune
    trainer = Trainer(cfg, bundle, data, train_ds, data.target_val,
                      mode="finetune", lr=cfg.base_lr, adapt_method="none",
                      rng=np.random.default_rng([cfg.seed, 3]))
    outcome = trainer.run(cfg.pretrain_iterations)
    acc = _final_accuracies(bundle.params, data)
    result = RunResult(method=cfg.method, direction=cfg.direction, seed=cfg.seed,
                       accuracies=acc, series=outcome.series,
                       all_series={"train": outcome.series}, chosen_multiplier=1.0,
                       wallclock_s=time.perf_counter() - start,
                       config_hash=config_hash(cfg), skipped=outcome.skipped)
    return bundle, data, result


def evaluate(params: RegParams, dataset: Dataset, mode: str) -> float:
    return model_mod.accuracy(params, dataset, mode)


def evaluate_predictor(predict_fn, dataset: Dataset) -> float:
    """Accuracy of an arbitrary (sample, scene) -> object id predictor."""
    if not dataset.samples:
        raise ValueError("dataset is empty")
    hits = 0
    for s in dataset.samples:
        if predict_fn(s, dataset.scene(s.scene_id)) == s.target_object_id:
            hits += 1
    return hits / len(dataset.samples)


def run_experiment(cfg: ExperimentConfig, data: DataBundle | None = None,
                   out_dir=None) -> RunResult:
    """Full protocol for one (method, direction) cell."""
    start = time.perf_counter()
    if data is None:
        data = build_datasets(cfg)
    if cfg.method in ("train_on_target_frac", "train_on_target_full"):
        bundle, _, result = train_on_target(cfg, data, full=cfg.method.endswith("full"))
        final_bundle = bundle
        pre_result = None
    else:
        bundle, _, pre_result = pretrain(replace(cfg, method=backbone_method(cfg.method)), data)
        tune = data.target_train if cfg.method == "finetune_on_target_full" else data.target_tune
        final_bundle, result = finetune(bundle, cfg, data, tune_ds=tune)
        result = replace(result, method=cfg.method)
        if out_dir is not None:
            save_checkpoint(bundle.store, _ckpt_path(out_dir, cfg, "pretrain"),
                            meta=checkpoint_meta(cfg, bundle, "pretrain"))
    if out_dir is not None:
        save_checkpoint(final_bundle.store, _ckpt_path(out_dir, cfg, "best"),
                        meta=checkpoint_meta(cfg, final_bundle, "best"))
    wall = time.perf_counter() - start
    result = replace(result, wallclock_s=wall)
    if pre_result is not None:
        result.all_series["pretrain"] = pre_result.series
    return result


def _ckpt_path(out_dir, cfg: ExperimentConfig, phase: str):
    import os
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    return os.path.join(out_dir, "checkpoints", f"{cfg.method}_{cfg.direction}_{phase}.ckpt")


# ---------------------------------------------------------------------------
# Results matrix
# ---------------------------------------------------------------------------

DEFAULT_MATRIX_METHODS = METHODS + BOUND_KEYS


def run_matrix(base_cfg: ExperimentConfig, out_dir,
               methods: tuple[str, ...] = DEFAULT_MATRIX_METHODS,
               directions: tuple[str, ...] = DIRECTIONS) -> list[RunResult]:
    """One run per (method, direction); writes results.csv, curves/, summary.md.

    Per-run failures are recorded in the status column and the matrix
    continues. Output files are deterministic for identical configs.
    """
    import os

    _pin_threads()
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "curves"), exist_ok=True)
    results: list[RunResult] = []
    data_cache: dict[str, DataBundle] = {}
    for direction in directions:
        for method in methods:
            cfg = replace(base_cfg, method=method, direction=direction)
            cfg.validate()
            if direction not in data_cache:
                data_cache[direction] = build_datasets(cfg)
            try:
                result = run_experiment(cfg, data_cache[direction], out_dir=out_dir)
            except DivergenceError as exc:
                result = RunResult(method=method, direction=direction, seed=cfg.seed,
                                   accuracies={}, series=[], all_series={},
                                   chosen_multiplier=float("nan"), wallclock_s=0.0,
                                   config_hash=config_hash(cfg),
                                   status=f"diverged@{exc.iteration}")
            except Exception as exc:   # per-run isolation: matrix continues
                logger.exception("run failed: %s %s", method, direction)
                result = RunResult(method=method, direction=direction, seed=cfg.seed,
                                   accuracies={}, series=[], all_series={},
                                   chosen_multiplier=float("nan"), wallclock_s=0.0,
                                   config_hash=config_hash(cfg),
                                   status=f"error:{type(exc).__name__}")
            results.append(result)
    write_results_csv(results, os.path.join(out_dir, "results.csv"))
    write_curves(results, os.path.join(out_dir, "curves"))
    write_summary(results, os.path.join(out_dir, "summary.md"))
    with open(os.path.join(out_dir, "runs.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps([json.loads(r.to_json()) for r in results], sort_keys=True, indent=1))
    return results


def write_results_csv(results: list[RunResult], path) -> None:
    lines = ["method,direction,split,accuracy,lr_multiplier,seed,status"]
    for r in results:
        for split_name in RESULT_SPLITS:
            acc = r.accuracies.get(split_name)
            acc_s = f"{acc:.6f}" if acc is not None else ""
            mult = f"{r.chosen_multiplier:g}" if r.status == "ok" else ""
            lines.append(f"{r.method},{r.direction},{split_name},{acc_s},{mult},{r.seed},{r.status}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_curves(results: list[RunResult], curves_dir) -> None:
    import os
    by_method: dict[str, list[RunResult]] = {}
    for r in results:
        by_method.setdefault(r.method, []).append(r)
    for method, runs in by_method.items():
        lines = ["direction,seed,lr_multiplier,iteration,accuracy,chosen"]
        for r in runs:
            chosen_key = f"{r.chosen_multiplier:g}"
            for key, series in sorted(r.all_series.items()):
                for it, acc in series:
                    chosen = 1 if key == chosen_key else 0
                    lines.append(f"{r.direction},{r.seed},{key},{it},{acc:.6f},{chosen}")
        with open(os.path.join(curves_dir, f"{method}.csv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def write_summary(results: list[RunResult], path) -> None:
    lines = [
        "# Experiment matrix",
        "",
        "| method | direction | source_val | target_val | target_test | lr mult | status | wallclock_s |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for r in results:
        def fmt(k):
            v = r.accuracies.get(k)
            return f"{v:.4f}" if v is not None else "-"
        mult = f"{r.chosen_multiplier:g}" if r.status == "ok" else "-"
        lines.append(f"| {r.method} | {r.direction} | {fmt('source_val')} | {fmt('target_val')} "
                     f"| {fmt('target_test')} | {mult} | {r.status} | {r.wallclock_s:.1f} |")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_plot_data(out_dir, dest_dir=None) -> list[str]:
    """Extract per-curve (iteration, accuracy) CSVs from a matrix output dir."""
    import os

    dest_dir = dest_dir or os.path.join(out_dir, "plotdata")
    curves_dir = os.path.join(out_dir, "curves")
    if not os.path.isdir(curves_dir):
        raise ConfigError(f"no curves directory under {out_dir}")
    os.makedirs(dest_dir, exist_ok=True)
    written = []
    for name in sorted(os.listdir(curves_dir)):
        if not name.endswith(".csv"):
            continue
        method = name[:-4]
        rows_by_dir: dict[str, list[tuple[int, str]]] = {}
        with open(os.path.join(curves_dir, name), encoding="utf-8") as fh:
            header = fh.readline()
            assert header.startswith("direction")
            for line in fh:
                direction, _seed, _mult, it, acc, chosen = line.strip().split(",")
                if chosen == "1":
                    rows_by_dir.setdefault(direction, []).append((int(it), acc))
        for direction, rows in sorted(rows_by_dir.items()):
            dest = os.path.join(dest_dir, f"{method}_{direction}.csv")
            with open(dest, "w", encoding="utf-8") as fh:
                fh.write("iteration,accuracy\n")
                for it, acc in sorted(rows):
                    fh.write(f"{it},{acc}\n")
            written.append(dest)
    return written
