"""Relationship detection by explaining the predicate classifier.

For each of the top-N predicted predicates ``k`` the prediction is
back-propagated to the raw node and edge inputs. The size of the gradient
is the relevance of that object / object pair for ``k``. Every ordered pair
is scored by the product of the two node relevances, the edge relevance,
both detection scores, the predicate probability and the relationship prior.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .graph import BBox, GraphBatch, ImageGraph
from .model import INPUT_EDGE, INPUT_SPATIAL, INPUT_VISUAL, ModelParams, forward
from .prior import PriorTable

NORMS = ("l1", "l2", "gxi", "gxi+")


@dataclass
class ExplainConfig:
    top_n: int = 10
    norm: str = "l1"
    cap: int = 100
    explain_logit: bool = False

    def __post_init__(self):
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")
        if self.cap < 1:
            raise ValueError("cap must be >= 1")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}; expected one of {NORMS}")


@dataclass
class RelevanceMap:
    predicate: int
    nodes: np.ndarray  # (O,)
    edges: np.ndarray  # (E,)
    norm: str


@dataclass
class RelationshipDetection:
    subject: int
    predicate: int
    object: int
    subject_box: BBox
    subject_class: int
    object_box: BBox
    object_class: int
    score: float
    pair_likelihood: float
    subject_score: float
    object_score: float
    predicate_score: float
    prior: float

    def factor_product(self) -> float:
        return self.pair_likelihood * self.subject_score * self.object_score * self.predicate_score * self.prior


def _reduce(grad: np.ndarray, inputs: np.ndarray, norm: str) -> np.ndarray:
    """Row-wise relevance of a (rows, features) gradient."""
    if norm == "l1":
        return np.abs(grad).sum(axis=1)
    if norm == "l2":
        return np.sqrt((grad * grad).sum(axis=1))
    gxi = grad * inputs
    if norm == "gxi":
        return np.abs(gxi).sum(axis=1)
    return np.maximum(gxi, 0.0).sum(axis=1)


def pair_likelihood(r_i: float, r_ij: float, r_j: float) -> float:
    return r_i * r_ij * r_j


def _batch_relevances(fwd, targets: np.ndarray, norm: str, explain_logit: bool):
    """Node and edge relevances of output ``targets[g]`` for every graph ``g``."""
    out = fwd.logits if explain_logit else fwd.y
    seed = np.zeros(out.shape)
    seed[np.arange(len(targets)), targets] = 1.0
    grads = ad.backward(fwd.tape, out, seed=seed)
    b = fwd.batch
    n, d_v = b.spatial.shape[0], int(np.prod(b.visual.shape[1:]))
    node_grad = np.concatenate([grads[INPUT_SPATIAL], grads[INPUT_VISUAL].reshape(n, d_v)], axis=1)
    node_in = np.concatenate([b.spatial, b.visual.reshape(n, d_v)], axis=1)
    return _reduce(node_grad, node_in, norm), _reduce(grads[INPUT_EDGE], b.edge_attr, norm)


def relevances(params: ModelParams, graph: ImageGraph, k: int, norm: str = "l1", explain_logit: bool = False) -> RelevanceMap:
    """Gradient-based relevance of every node and edge of ``graph`` for predicate ``k``."""
    K = params.config.num_predicates
    if not 0 <= k < K:
        raise IndexError(f"predicate {k} out of range [0, {K})")
    if norm not in NORMS:
        raise ValueError(f"unknown norm {norm!r}")
    fwd = forward(params, graph)
    rn, re = _batch_relevances(fwd, np.array([k]), norm, explain_logit)
    return RelevanceMap(k, rn, re, norm)


def _prior_weights(prior: PriorTable | None, k: int, ci: np.ndarray, cj: np.ndarray) -> np.ndarray:
    if prior is None:
        return np.ones(len(ci))
    if prior.mode == "uniform" or not prior.observed[k]:
        return np.full(len(ci), 1.0 / (prior.num_classes**2))
    return prior.table[k, ci, cj]


def _rank(cands: list[tuple]) -> list[int]:
    # sort by score descending, ties by (predicate, subject, object)
    return sorted(range(len(cands)), key=lambda t: (-cands[t][0], cands[t][1], cands[t][2], cands[t][3]))


def detect_batch(
    params: ModelParams,
    graphs: Sequence[ImageGraph],
    prior: PriorTable | None,
    config: ExplainConfig,
    keep_all: bool = False,
) -> list[list[RelationshipDetection]]:
    """Ranked detections for each graph; ``keep_all`` skips the per-image cap."""
    graphs = list(graphs)
    if not graphs:
        return []
    K = params.config.num_predicates
    if prior is not None and prior.num_predicates != K:
        raise ValueError(f"prior covers {prior.num_predicates} predicates, model predicts {K}")
    batch = GraphBatch.from_graphs(graphs, params.config.visual_shape)
    fwd = forward(params, batch)
    y = fwd.y.data
    n_top = min(config.top_n, K)
    top = np.argsort(-y, axis=1, kind="stable")[:, :n_top]
    node_off, edge_off = batch.node_offsets, batch.edge_offsets

    per_graph: list[list] = [[] for _ in graphs]
    for rank in range(n_top):
        rn, re = _batch_relevances(fwd, top[:, rank], config.norm, config.explain_logit)
        for g, graph in enumerate(graphs):
            if graph.num_edges == 0:
                continue
            k = int(top[g, rank])
            i, j = graph.edges[:, 0], graph.edges[:, 1]
            r_node = rn[node_off[g] : node_off[g] + graph.num_nodes]
            r_edge = re[edge_off[g] : edge_off[g] + graph.num_edges]
            pl = r_node[i] * r_edge * r_node[j]
            ci, cj = graph.class_ids[i], graph.class_ids[j]
            pw = _prior_weights(prior, k, ci, cj)
            ds = graph.scores
            score = pl * ds[i] * ds[j] * y[g, k] * pw
            for e in range(graph.num_edges):
                per_graph[g].append(
                    (float(score[e]), k, int(i[e]), int(j[e]), float(pl[e]), float(ds[i[e]]), float(ds[j[e]]), float(y[g, k]), float(pw[e]))
                )

    results = []
    for graph, cands in zip(graphs, per_graph):
        order = _rank(cands)
        if not keep_all:
            order = order[: config.cap]
        dets = []
        for t in order:
            score, k, i, j, pl, si, sj, yk, pw = cands[t]
            dets.append(
                RelationshipDetection(
                    i, k, j,
                    graph.boxes[i], int(graph.class_ids[i]),
                    graph.boxes[j], int(graph.class_ids[j]),
                    score, pl, si, sj, yk, pw,
                )
            )
        results.append(dets)
    return results


def detect_relationships(
    params: ModelParams,
    graph: ImageGraph,
    prior: PriorTable | None,
    config: ExplainConfig,
    keep_all: bool = False,
) -> list[RelationshipDetection]:
    return detect_batch(params, [graph], prior, config, keep_all)[0]
