"""Modular expression-object matching model.

Three visual modules score a candidate against expression-derived query
vectors: subject (feed-forward encoder over the object feature), location
(affine over the normalized box vector), and relation (max cosine over the
candidate's relation-graph nodes, excluding the candidate itself). The
overall score is the module-weight softmax mixture. Training minimizes a
margin hinge over sampled negative objects and negative expressions.

Two scoring paths exist: a per-sample reference path (`score`) built
straight from the submodules, and a batched path (`BatchScorer`) used by
training and evaluation; a test pins their numerical agreement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import language, vocab
from .diffcore import ParameterStore
from .gnn import GnnParams, init_gnn_params, location_vector, normalized_adjacency, propagate
from .graphs import build_relation_graph
from .language import LanguageParams, init_language_params
from .synthdata import Dataset, ReferringSample, Scene
from .vocab import CrossAttentionEmbedding, VocabPartition, init_embedding

COS_EPS = 1e-12
MASKED_SCORE = -2.0   # below any reachable cosine
SINGLETON_SCORE = -1.0


@dataclass
class ModelDims:
    d: int = 64          # embedding / module feature dim
    h: int = 64          # recurrent state per direction
    d_obj: int = 32      # synthetic object feature dim
    d_gnn: int = 64
    M: int = 5           # nearest neighbors in the geometric graph
    hop_cap: int | None = 2


@dataclass
class RegParams:
    dims: ModelDims
    emb: CrossAttentionEmbedding
    lang: LanguageParams
    subj_w1: torch.Tensor    # (d_obj, d)
    subj_b1: torch.Tensor
    subj_w2: torch.Tensor    # (d, d)
    subj_b2: torch.Tensor
    loc_weight: torch.Tensor  # (5, d)
    loc_bias: torch.Tensor
    gnn: GnnParams
    margin: float = 0.1
    lam1: float = 1.0        # negative-expression term
    lam2: float = 1.0        # negative-object term

    @property
    def dtype(self) -> torch.dtype:
        return self.subj_w1.dtype


@dataclass
class ModuleScores:
    s_sub: torch.Tensor
    s_loc: torch.Tensor
    s_rel: torch.Tensor
    weights: torch.Tensor    # (3,) softmax module weights
    s_overall: torch.Tensor
    rel_singleton: bool = False


def init_reg_params(store: ParameterStore, partition: VocabPartition, dims: ModelDims,
                    rng: np.random.Generator, attention_enabled: bool = True,
                    margin: float = 0.1, lam1: float = 1.0, lam2: float = 1.0) -> RegParams:
    emb = init_embedding(store, partition, dims.d, rng, attention_enabled=attention_enabled)
    lang = init_language_params(store, dims.d, dims.h, rng)

    def glorot(shape):
        bound = np.sqrt(6.0 / sum(shape))
        return rng.uniform(-bound, bound, size=shape)

    params = RegParams(
        dims=dims,
        emb=emb,
        lang=lang,
        subj_w1=store.register("subj.w1", glorot((dims.d_obj, dims.d))),
        subj_b1=store.register("subj.b1", np.zeros(dims.d)),
        subj_w2=store.register("subj.w2", glorot((dims.d, dims.d))),
        subj_b2=store.register("subj.b2", np.zeros(dims.d)),
        loc_weight=store.register("loc.weight", glorot((5, dims.d))),
        loc_bias=store.register("loc.bias", np.zeros(dims.d)),
        gnn=init_gnn_params(store, dims.d_obj, dims.d_gnn, dims.d, rng),
        margin=margin, lam1=lam1, lam2=lam2,
    )
    return params


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum() / (a.norm() * b.norm() + COS_EPS)


def cosine_rows(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine for (..., d) against (..., d)."""
    dot = (a * b).sum(dim=-1)
    return dot / (a.norm(dim=-1) * b.norm(dim=-1) + COS_EPS)


def subject_feature(feat: torch.Tensor, params: RegParams) -> torch.Tensor:
    return torch.relu(feat @ params.subj_w1 + params.subj_b1) @ params.subj_w2 + params.subj_b2


def location_feature(locvec: torch.Tensor, params: RegParams) -> torch.Tensor:
    return locvec @ params.loc_weight + params.loc_bias


def _as_tensor(arr, dtype: torch.dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(arr, dtype=np.float64)).to(dtype)


def score(tokens: list[str], candidate_id: int, scene: Scene, params: RegParams,
          mode: str, unk_token: str | None = None) -> ModuleScores:
    """Reference scoring path for one (expression, candidate) pair."""
    params.emb.set_mode(mode)
    domain = params.emb.active_domain()
    E = vocab.embed(tokens, params.emb, domain, unk_token)
    enc = language.encode(E, params.lang)
    q_sub = language.attended_query(enc, params.lang.f_sub)
    q_loc = language.attended_query(enc, params.lang.f_loc)
    q_rel = language.attended_query(enc, params.lang.f_rel)
    wts = language.module_weights(enc, params.lang)

    dtype = params.dtype
    cand = scene.object_by_id(candidate_id)
    s_sub = cosine(subject_feature(_as_tensor(cand.feature, dtype), params), q_sub)
    locvec = _as_tensor(location_vector(cand, scene.W_img, scene.H_img), dtype)
    s_loc = cosine(location_feature(locvec, params), q_loc)

    graph = build_relation_graph(scene, candidate_id, params.dims.M, params.dims.hop_cap)
    singleton = len(graph.nodes) == 1
    if singleton:
        s_rel = torch.tensor(SINGLETON_SCORE, dtype=dtype)
    else:
        feats = {o.id: o.feature for o in scene.objects if o.id in graph.nodes}
        states = propagate(graph, feats, params.gnn)
        rel_scores = []
        for oid in sorted(graph.nodes):
            if oid == candidate_id:
                continue
            obj = scene.object_by_id(oid)
            r_u = torch.cat([states[oid], _as_tensor(location_vector(obj, scene.W_img, scene.H_img), dtype)])
            r_u = r_u @ params.gnn.rel_weight + params.gnn.rel_bias
            rel_scores.append(cosine(r_u, q_rel))
        s_rel = torch.stack(rel_scores).max()
    s_overall = wts[0] * s_sub + wts[1] * s_loc + wts[2] * s_rel
    return ModuleScores(s_sub=s_sub, s_loc=s_loc, s_rel=s_rel, weights=wts,
                        s_overall=s_overall, rel_singleton=singleton)


def predict(tokens: list[str], scene: Scene, params: RegParams, mode: str,
            unk_token: str | None = None) -> int:
    """Argmax of the overall score over all scene objects; ties -> lower id."""
    best_id, best_score = None, None
    for obj in sorted(scene.objects, key=lambda o: o.id):
        s = float(score(tokens, obj.id, scene, params, mode, unk_token).s_overall)
        if best_score is None or s > best_score:
            best_id, best_score = obj.id, s
    return best_id


def hinge_loss(tokens: list[str], target_id: int, scene: Scene,
               neg_object_ids: list[int], neg_expressions: list[list[str]],
               params: RegParams, mode: str,
               unk_token: str | None = None) -> torch.Tensor | None:
    """Margin hinge over sampled negatives; None when no negatives exist."""
    if not neg_object_ids and not neg_expressions:
        return None
    s_pos = score(tokens, target_id, scene, params, mode, unk_token).s_overall
    zero = torch.tensor(0.0, dtype=params.dtype)
    margin = params.margin
    term_expr = zero
    if neg_expressions:
        parts = [torch.clamp(margin + score(r, target_id, scene, params, mode, unk_token).s_overall - s_pos, min=0.0)
                 for r in neg_expressions]
        term_expr = torch.stack(parts).mean()
    term_obj = zero
    if neg_object_ids:
        parts = [torch.clamp(margin + score(tokens, o, scene, params, mode, unk_token).s_overall - s_pos, min=0.0)
                 for o in neg_object_ids]
        term_obj = torch.stack(parts).mean()
    return params.lam1 * term_expr + params.lam2 * term_obj


# ---------------------------------------------------------------------------
# Batched scoring path
# ---------------------------------------------------------------------------

@dataclass
class SceneTensors:
    ids: list[int]
    id_pos: dict[int, int]
    feat_np: np.ndarray            # (N, d_obj)
    loc_np: np.ndarray             # (N, 5)
    node_idx: list[np.ndarray]     # per candidate position: graph node positions
    adj: list[np.ndarray]          # per candidate position: normalized adjacency
    cand_in_graph: list[int]


@dataclass
class EncodedBatch:
    q_sub: torch.Tensor    # (B, d)
    q_loc: torch.Tensor
    q_rel: torch.Tensor
    weights: torch.Tensor  # (B, 3)
    summary: torch.Tensor  # (B, 4h), [h_first, h_last]


@dataclass
class ScoreBatch:
    overall: torch.Tensor   # (P,)
    s_sub: torch.Tensor
    s_loc: torch.Tensor
    s_rel: torch.Tensor
    subj_feat: torch.Tensor  # (P, d) subject features of the scored objects


class BatchScorer:
    """Batched scoring with per-scene graph/feature caches.

    Caches hold only data (object features, location vectors, normalized
    adjacencies), so they stay valid as parameters train.
    """

    def __init__(self, params: RegParams, unk_token: str | None = None):
        self.params = params
        self.unk_token = unk_token
        self._scenes: dict[int, SceneTensors] = {}

    def scene_tensors(self, scene: Scene) -> SceneTensors:
        st = self._scenes.get(id(scene))
        if st is not None:
            return st
        dims = self.params.dims
        ids = sorted(o.id for o in scene.objects)
        id_pos = {oid: i for i, oid in enumerate(ids)}
        objs = {o.id: o for o in scene.objects}
        feat_np = np.stack([np.asarray(objs[oid].feature, dtype=np.float64) for oid in ids])
        loc_np = np.stack([location_vector(objs[oid], scene.W_img, scene.H_img) for oid in ids])
        node_idx, adjs, cand_pos = [], [], []
        for oid in ids:
            graph = build_relation_graph(scene, oid, dims.M, dims.hop_cap)
            g_ids, adj = normalized_adjacency(graph)
            node_idx.append(np.array([id_pos[g] for g in g_ids], dtype=np.int64))
            adjs.append(adj)
            cand_pos.append(g_ids.index(oid))
        st = SceneTensors(ids=ids, id_pos=id_pos, feat_np=feat_np, loc_np=loc_np,
                          node_idx=node_idx, adj=adjs, cand_in_graph=cand_pos)
        self._scenes[id(scene)] = st
        return st

    def encode(self, expressions: list[list[str]], domain: str) -> EncodedBatch:
        """Encode expressions (grouped internally by length)."""
        emb = self.params.emb
        lang = self.params.lang
        table = vocab.domain_table(emb, domain).T.contiguous()   # (n_vocab, d)
        groups: dict[int, list[int]] = {}
        for i, toks in enumerate(expressions):
            if len(toks) < 1:
                raise ValueError("expression must have at least one token")
            groups.setdefault(len(toks), []).append(i)
        parts = {"q_sub": [], "q_loc": [], "q_rel": [], "wts": [], "summary": []}
        order: list[int] = []
        for T in sorted(groups):
            idxs = groups[T]
            order.extend(idxs)
            index = torch.tensor(
                [[vocab.token_index(emb, t, domain, self.unk_token) for t in expressions[i]]
                 for i in idxs], dtype=torch.long)
            E = torch.nn.functional.embedding(index, table)      # (B, T, d)
            H = language.encode_batch(E, lang)
            q_sub, q_loc, q_rel, wts, summary = language.queries_and_weights_batch(E, H, lang)
            parts["q_sub"].append(q_sub)
            parts["q_loc"].append(q_loc)
            parts["q_rel"].append(q_rel)
            parts["wts"].append(wts)
            parts["summary"].append(summary)
        inv = torch.argsort(torch.tensor(order, dtype=torch.long))
        return EncodedBatch(
            q_sub=torch.cat(parts["q_sub"])[inv],
            q_loc=torch.cat(parts["q_loc"])[inv],
            q_rel=torch.cat(parts["q_rel"])[inv],
            weights=torch.cat(parts["wts"])[inv],
            summary=torch.cat(parts["summary"])[inv],
        )

    def score_pairs(self, encoded: EncodedBatch,
                    pairs: list[tuple[int, Scene, int]]) -> ScoreBatch:
        """Score (expression index, scene, candidate id) pairs."""
        params = self.params
        dims = params.dims
        np_dtype = np.float32 if params.dtype == torch.float32 else np.float64
        P = len(pairs)
        sts = [self.scene_tensors(scene) for (_, scene, _) in pairs]
        cpos = [st.id_pos[cand] for st, (_, _, cand) in zip(sts, pairs)]
        expr_idx = torch.tensor([e for (e, _, _) in pairs], dtype=torch.long)

        subj_in = torch.from_numpy(
            np.stack([st.feat_np[c] for st, c in zip(sts, cpos)]).astype(np_dtype))
        loc_in = torch.from_numpy(
            np.stack([st.loc_np[c] for st, c in zip(sts, cpos)]).astype(np_dtype))

        sizes = [len(st.node_idx[c]) for st, c in zip(sts, cpos)]
        n_max = max(sizes)
        feat_pad = np.zeros((P, n_max, dims.d_obj), dtype=np_dtype)
        loc_pad = np.zeros((P, n_max, 5), dtype=np_dtype)
        adj_pad = np.zeros((P, n_max, n_max), dtype=np_dtype)
        keep = np.zeros((P, n_max), dtype=bool)   # valid non-candidate nodes
        for p, (st, c) in enumerate(zip(sts, cpos)):
            nodes = st.node_idx[c]
            n = len(nodes)
            feat_pad[p, :n] = st.feat_np[nodes]
            loc_pad[p, :n] = st.loc_np[nodes]
            adj_pad[p, :n, :n] = st.adj[c]
            keep[p, :n] = True
            keep[p, st.cand_in_graph[c]] = False

        X = torch.from_numpy(feat_pad)
        A = torch.from_numpy(adj_pad)
        H1 = torch.relu(A @ (X @ params.gnn.layer1_weight) + params.gnn.layer1_bias)
        H2 = A @ (H1 @ params.gnn.layer2_weight) + params.gnn.layer2_bias
        R = torch.cat([H2, torch.from_numpy(loc_pad)], dim=2) @ params.gnn.rel_weight + params.gnn.rel_bias

        q_rel = encoded.q_rel[expr_idx]
        rel_cos = cosine_rows(R, q_rel.unsqueeze(1))             # (P, n_max)
        keep_t = torch.from_numpy(keep)
        masked = torch.where(keep_t, rel_cos, torch.tensor(MASKED_SCORE, dtype=params.dtype))
        has_neighbor = keep_t.any(dim=1)
        s_rel = torch.where(has_neighbor, masked.max(dim=1).values,
                            torch.tensor(SINGLETON_SCORE, dtype=params.dtype))

        subj_feat = torch.relu(subj_in @ params.subj_w1 + params.subj_b1) @ params.subj_w2 + params.subj_b2
        s_sub = cosine_rows(subj_feat, encoded.q_sub[expr_idx])
        s_loc = cosine_rows(loc_in @ params.loc_weight + params.loc_bias,
                            encoded.q_loc[expr_idx])

        wts = encoded.weights[expr_idx]
        overall = (wts * torch.stack([s_sub, s_loc, s_rel], dim=1)).sum(dim=1)
        return ScoreBatch(overall=overall, s_sub=s_sub, s_loc=s_loc, s_rel=s_rel,
                          subj_feat=subj_feat)

    def subject_features(self, rows: np.ndarray) -> torch.Tensor:
        feats = torch.as_tensor(np.asarray(rows, dtype=np.float64)).to(self.params.dtype)
        return torch.relu(feats @ self.params.subj_w1 + self.params.subj_b1) \
            @ self.params.subj_w2 + self.params.subj_b2


def predict_batch(samples: list[ReferringSample], dataset: Dataset, params: RegParams,
                  mode: str, scorer: BatchScorer | None = None,
                  unk_token: str | None = vocab.UNK_TOKEN) -> list[int]:
    """Batched argmax prediction for many samples (no gradients)."""
    params.emb.set_mode(mode)
    domain = params.emb.active_domain()
    if scorer is None:
        scorer = BatchScorer(params, unk_token=unk_token)
    preds = []
    with torch.no_grad():
        chunk = 256
        for start in range(0, len(samples), chunk):
            batch = samples[start:start + chunk]
            encoded = scorer.encode([s.tokens for s in batch], domain)
            pairs = []
            bounds = []
            for i, s in enumerate(batch):
                scene = dataset.scene(s.scene_id)
                ids = sorted(o.id for o in scene.objects)
                bounds.append((len(pairs), len(pairs) + len(ids), ids))
                pairs.extend((i, scene, oid) for oid in ids)
            overall = scorer.score_pairs(encoded, pairs).overall.numpy()
            for lo, hi, ids in bounds:
                preds.append(ids[int(np.argmax(overall[lo:hi]))])
    return preds


def accuracy(params: RegParams, dataset: Dataset, mode: str,
             scorer: BatchScorer | None = None) -> float:
    """Fraction of samples whose argmax matches the ground-truth object."""
    if not dataset.samples:
        raise ValueError("dataset is empty")
    preds = predict_batch(dataset.samples, dataset, params, mode, scorer)
    hits = sum(1 for p, s in zip(preds, dataset.samples) if p == s.target_object_id)
    return hits / len(dataset.samples)
