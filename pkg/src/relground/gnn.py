"""Weighted-mean graph propagation and the relation feature head.

Aggregation per round: each node averages its neighbors' states with the
graph's edge weights (a self-loop of weight 1 is inserted first, which
keeps isolated nodes defined and the node's own state in the mix), then
applies an affine map and the round's nonlinearity: ReLU after round one,
identity after round two so relation features are unconstrained reals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffcore import ParameterStore
from .graphs import RelationGraph
from .synthdata import SceneObject


class MissingFeatureError(KeyError):
    """A graph node has no feature vector."""


@dataclass
class GnnParams:
    layer1_weight: torch.Tensor   # (d_obj, d_gnn)
    layer1_bias: torch.Tensor     # (d_gnn,)
    layer2_weight: torch.Tensor   # (d_gnn, d_gnn)
    layer2_bias: torch.Tensor
    rel_weight: torch.Tensor      # (d_gnn + 5, d)
    rel_bias: torch.Tensor        # (d,)


def init_gnn_params(store: ParameterStore, d_obj: int, d_gnn: int, d_out: int,
                    rng: np.random.Generator, prefix: str = "gnn") -> GnnParams:
    def glorot(shape):
        bound = np.sqrt(6.0 / sum(shape))
        return rng.uniform(-bound, bound, size=shape)

    return GnnParams(
        layer1_weight=store.register(f"{prefix}.layer1_weight", glorot((d_obj, d_gnn))),
        layer1_bias=store.register(f"{prefix}.layer1_bias", np.zeros(d_gnn)),
        layer2_weight=store.register(f"{prefix}.layer2_weight", glorot((d_gnn, d_gnn))),
        layer2_bias=store.register(f"{prefix}.layer2_bias", np.zeros(d_gnn)),
        rel_weight=store.register(f"{prefix}.rel_weight", glorot((d_gnn + 5, d_out))),
        rel_bias=store.register(f"{prefix}.rel_bias", np.zeros(d_out)),
    )


def location_vector(obj: SceneObject, W_img: float, H_img: float) -> np.ndarray:
    """Normalized box encoding [x_tl/W, y_tl/H, x_br/W, y_br/H, area/(W*H)]."""
    x0, y0, x1, y1 = obj.box
    return np.array([
        x0 / W_img,
        y0 / H_img,
        x1 / W_img,
        y1 / H_img,
        ((x1 - x0) * (y1 - y0)) / (W_img * H_img),
    ])


def normalized_adjacency(graph: RelationGraph) -> tuple[list[int], np.ndarray]:
    """(sorted node ids, row-normalized weight matrix with unit self-loops)."""
    ids = sorted(graph.nodes)
    pos = {oid: i for i, oid in enumerate(ids)}
    n = len(ids)
    mat = np.eye(n)
    for e, w in graph.weights.items():
        u, v = tuple(e)
        mat[pos[u], pos[v]] = w
        mat[pos[v], pos[u]] = w
    mat /= mat.sum(axis=1, keepdims=True)
    return ids, mat


def propagate(graph: RelationGraph, node_features: dict[int, np.ndarray | torch.Tensor],
              params: GnnParams) -> dict[int, torch.Tensor]:
    """Two rounds of weighted-mean aggregation; returns per-node states."""
    for oid in graph.nodes:
        if oid not in node_features:
            raise MissingFeatureError(f"no feature for node {oid}")
    dtype = params.layer1_weight.dtype
    ids, adj_np = normalized_adjacency(graph)
    rows = [torch.as_tensor(np.asarray(node_features[oid], dtype=np.float64)).to(dtype)
            if not torch.is_tensor(node_features[oid]) else node_features[oid]
            for oid in ids]
    X = torch.stack(rows)
    adj = torch.as_tensor(adj_np).to(dtype)
    H1 = torch.relu(adj @ (X @ params.layer1_weight) + params.layer1_bias)
    H2 = adj @ (H1 @ params.layer2_weight) + params.layer2_bias
    return {oid: H2[i] for i, oid in enumerate(ids)}


def relation_feature(h_u: torch.Tensor, l_u: torch.Tensor | np.ndarray,
                     weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Affine map on [gnn state; location vector]."""
    if not torch.is_tensor(l_u):
        l_u = torch.as_tensor(np.asarray(l_u, dtype=np.float64))
    return torch.cat([h_u, l_u]) @ weight + bias
