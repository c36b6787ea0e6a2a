"""Per-candidate relation graphs.

A candidate's graph is the union of a geometric star (edges to its M
nearest objects by box-center distance) and the undirected semantic
component the candidate belongs to in the scene's triplet graph, truncated
at ``hop_cap`` hops. Edge weights: semantic membership wins and weighs 1;
geometric-only edges weigh min_distance / distance, so the nearest
neighbor gets 1 and farther ones decay.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

from .synthdata import Scene

DIST_FLOOR = 1e-6  # px; guards coincident centers


def center_distance(scene: Scene, u: int, v: int) -> float:
    ux, uy = scene.object_by_id(u).center()
    vx, vy = scene.object_by_id(v).center()
    return math.hypot(ux - vx, uy - vy)


@dataclass
class GeoGraph:
    candidate_id: int
    nodes: set[int]
    edges: set[frozenset[int]]


@dataclass
class SemGraph:
    candidate_id: int
    nodes: set[int]
    edges: set[frozenset[int]]
    labels: dict[frozenset[int], list[str]] = field(default_factory=dict)


@dataclass
class RelationGraph:
    candidate_id: int
    nodes: set[int]
    tags: dict[frozenset[int], str]        # edge -> geo | sem | both
    weights: dict[frozenset[int], float]
    labels: dict[frozenset[int], list[str]] = field(default_factory=dict)

    @property
    def edges(self) -> set[frozenset[int]]:
        return set(self.tags)

    def weight(self, u: int, v: int) -> float:
        return self.weights[frozenset((u, v))]


def build_geo_graph(scene: Scene, candidate_id: int, M: int) -> GeoGraph:
    """Star of the candidate and its min(M, N-1) nearest other objects."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if len(scene.objects) < 2:
        raise ValueError("scene must contain at least 2 objects")
    others = [o.id for o in scene.objects if o.id != candidate_id]
    others.sort(key=lambda oid: (center_distance(scene, candidate_id, oid), oid))
    chosen = others[:min(M, len(others))]
    return GeoGraph(
        candidate_id=candidate_id,
        nodes={candidate_id, *chosen},
        edges={frozenset((candidate_id, oid)) for oid in chosen},
    )


def build_sem_graph(scene: Scene, candidate_id: int, hop_cap: int | None = 2) -> SemGraph:
    """Undirected semantic component of the candidate within ``hop_cap`` hops.

    ``hop_cap=None`` keeps the whole component. Edges between any two
    retained nodes are kept (induced subgraph); triplet relation words are
    retained as labels for diagnostics only.
    """
    adjacency: dict[int, set[int]] = {}
    labels: dict[frozenset[int], list[str]] = {}
    for subj, word, obj in scene.triplets:
        if subj == obj:
            continue
        adjacency.setdefault(subj, set()).add(obj)
        adjacency.setdefault(obj, set()).add(subj)
        labels.setdefault(frozenset((subj, obj)), []).append(word)

    depth = {candidate_id: 0}
    queue = deque([candidate_id])
    while queue:
        node = queue.popleft()
        if hop_cap is not None and depth[node] >= hop_cap:
            continue
        for nxt in adjacency.get(node, ()):
            if nxt not in depth:
                depth[nxt] = depth[node] + 1
                queue.append(nxt)

    nodes = set(depth)
    edges = {e for e in labels if all(n in nodes for n in e)}
    return SemGraph(candidate_id=candidate_id, nodes=nodes, edges=edges,
                    labels={e: sorted(labels[e]) for e in edges})


def union_and_weight(geo: GeoGraph, sem: SemGraph, scene: Scene) -> RelationGraph:
    """Union the two subgraphs and attach mixed edge weights."""
    if geo.candidate_id != sem.candidate_id:
        raise ValueError("geo and sem graphs describe different candidates")
    tags: dict[frozenset[int], str] = {}
    for e in geo.edges:
        tags[e] = "geo"
    for e in sem.edges:
        tags[e] = "both" if e in tags else "sem"

    geo_dists = {e: max(center_distance(scene, *sorted(e)), DIST_FLOOR) for e in geo.edges}
    min_dist = min(geo_dists.values()) if geo_dists else DIST_FLOOR

    weights = {}
    for e, tag in tags.items():
        if tag == "geo":
            weights[e] = min_dist / geo_dists[e]
        else:
            weights[e] = 1.0
    return RelationGraph(
        candidate_id=geo.candidate_id,
        nodes=geo.nodes | sem.nodes,
        tags=tags,
        weights=weights,
        labels=dict(sem.labels),
    )


def build_relation_graph(scene: Scene, candidate_id: int, M: int,
                         hop_cap: int | None = 2) -> RelationGraph:
    geo = build_geo_graph(scene, candidate_id, M)
    sem = build_sem_graph(scene, candidate_id, hop_cap)
    return union_and_weight(geo, sem, scene)


def graph_to_json(graph: RelationGraph) -> str:
    """Debug export; the format is diagnostic, not stable."""
    payload = {
        "candidate": graph.candidate_id,
        "nodes": sorted(graph.nodes),
        "edges": [
            {"u": min(e), "v": max(e), "tag": graph.tags[e],
             "weight": graph.weights[e], "labels": graph.labels.get(e, [])}
            for e in sorted(graph.edges, key=lambda e: (min(e), max(e)))
        ],
    }
    return json.dumps(payload, sort_keys=True)
