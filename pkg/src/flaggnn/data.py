"""Dataset containers, file loading and synthetic generators.

``make_citation_like`` produces a stand-in for a Planetoid-style citation
graph (sparse binary bag-of-words features, homophilous edges, 20 labels per
class) for environments where the real files are not available.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from flaggnn.errors import ConfigError, DatasetError
from flaggnn.graph import (CsrGraph, GraphBatch, NodeSplit, NormalizedAdjacency, batch_graphs,
                           build_normalized_adjacency, load_features, load_graph, load_labels,
                           load_split, save_features, save_graph, save_labels, save_split)


@dataclass(frozen=True, eq=False)
class NodeDataset:
    graph: CsrGraph
    adjacency: NormalizedAdjacency
    features: np.ndarray
    labels: np.ndarray
    split: NodeSplit
    num_classes: int

    @classmethod
    def build(cls, graph: CsrGraph, features, labels, split: NodeSplit) -> "NodeDataset":
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.shape[0] != graph.num_nodes or len(labels) != graph.num_nodes:
            raise DatasetError(
                f"size mismatch: graph has {graph.num_nodes} nodes, features {features.shape[0]} rows, "
                f"labels {len(labels)} entries")
        return cls(graph, build_normalized_adjacency(graph), features, labels, split,
                   int(labels.max()) + 1)


@dataclass(frozen=True, eq=False)
class GraphDataset:
    """Whole-graph classification; features are token ids into a vocabulary."""

    train: GraphBatch
    val: GraphBatch
    test: GraphBatch
    vocab: int
    num_classes: int


def load_node_dataset(spec) -> NodeDataset:
    missing = [k for k in ("graph", "features", "labels", "split") if getattr(spec, k) is None]
    if missing:
        raise ConfigError(f"missing data path(s): {', '.join('data.' + k for k in missing)}")
    for k in ("graph", "features", "labels", "split"):
        if not Path(getattr(spec, k)).is_file():
            raise DatasetError(f"data.{k}: no such file {getattr(spec, k)}")
    g = load_graph(spec.graph)
    x = load_features(spec.features)
    y = load_labels(spec.labels, g.num_nodes)
    split = load_split(spec.split, g.num_nodes)
    return NodeDataset.build(g, x, y, split)


def write_node_dataset(directory, data: NodeDataset) -> dict:
    """Write edges.txt / features.txt / labels.txt / split.txt; returns the paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {k: d / f"{k}.txt" for k in ("edges", "features", "labels", "split")}
    save_graph(paths["edges"], data.graph)
    save_features(paths["features"], data.features)
    save_labels(paths["labels"], data.labels)
    save_split(paths["split"], data.split)
    return paths


def _planetoid_split(labels, num_classes, per_class, n_val, n_test, rng) -> NodeSplit:
    n = len(labels)
    order = rng.permutation(n)
    train = []
    for c in range(num_classes):
        train += [i for i in order if labels[i] == c][:per_class]
    taken = set(train)
    rest = [i for i in order if i not in taken]
    return NodeSplit.from_indices(n, train, rest[:n_val], rest[n_val:n_val + n_test])


def make_toy_dataset(num_nodes: int = 60, num_classes: int = 3, num_features: int = 12,
                     seed: int = 0) -> NodeDataset:
    """Small homophilous graph with noisy binary class-indicator features."""
    rng = np.random.default_rng(seed)
    labels = np.arange(num_nodes) % num_classes
    rng.shuffle(labels)
    edges = []
    for u in range(num_nodes):
        for v in range(u + 1, num_nodes):
            p = 0.15 if labels[u] == labels[v] else 0.02
            if rng.random() < p:
                edges.append((u, v))
    block = num_features // num_classes
    x = (rng.random((num_nodes, num_features)) < 0.15).astype(np.float64)
    for i, c in enumerate(labels):
        x[i, c * block:(c + 1) * block] = rng.random(block) < 0.5
    split = _planetoid_split(labels, num_classes, per_class=4, n_val=15, n_test=num_nodes, rng=rng)
    return NodeDataset.build(CsrGraph.from_edges(num_nodes, edges), x, labels, split)


# Class sizes and summary statistics of the standard Cora citation graph.
CITATION_CLASS_SIZES = (351, 217, 418, 818, 426, 298, 180)
CITATION_NUM_FEATURES = 1433
CITATION_NUM_EDGES = 5278


def make_citation_like(seed: int = 0, *, words_per_node: int = 18, topic_words: int = 60,
                       topic_rate: float = 0.2, homophily: float = 0.66) -> NodeDataset:
    """Cora-scale synthetic citation graph.

    Each node draws ``words_per_node`` distinct words, a ``topic_rate``
    fraction from its class's topic vocabulary and the rest from a Zipf-like
    background. Edges connect degree-weighted endpoints, within-class with
    probability ``homophily``.
    """
    rng = np.random.default_rng(seed)
    sizes = np.asarray(CITATION_CLASS_SIZES)
    n, c, d = int(sizes.sum()), len(sizes), CITATION_NUM_FEATURES
    labels = rng.permutation(np.repeat(np.arange(c), sizes))

    background = 1.0 / np.arange(1, d + 1) ** 0.8
    background = rng.permutation(background / background.sum())
    topics = [rng.choice(d, size=topic_words, replace=False) for _ in range(c)]
    x = np.zeros((n, d))
    for i in range(n):
        k_topic = rng.binomial(words_per_node, topic_rate)
        words = set(rng.choice(topics[labels[i]], size=k_topic, replace=False).tolist())
        while len(words) < words_per_node:
            words.add(int(rng.choice(d, p=background)))
        x[i, list(words)] = 1.0

    weight = rng.pareto(2.5, size=n) + 1.0
    members = [np.flatnonzero(labels == k) for k in range(c)]
    member_p = [weight[m] / weight[m].sum() for m in members]
    all_p = weight / weight.sum()
    edges = set()
    while len(edges) < CITATION_NUM_EDGES:
        u = int(rng.choice(n, p=all_p))
        if rng.random() < homophily:
            v = int(rng.choice(members[labels[u]], p=member_p[labels[u]]))
        else:
            v = int(rng.choice(n, p=all_p))
            if labels[v] == labels[u]:
                continue
        if u != v:
            edges.add((min(u, v), max(u, v)))
    split = _planetoid_split(labels, c, per_class=20, n_val=500, n_test=1000, rng=rng)
    return NodeDataset.build(CsrGraph.from_edges(n, sorted(edges)), x, labels, split)


def make_graph_toy(num_graphs: int = 90, vocab: int = 6, seed: int = 0) -> GraphDataset:
    """Small graphs whose label says which of tokens 0/1 dominates."""
    rng = np.random.default_rng(seed)
    graphs = []
    for _ in range(num_graphs):
        size = int(rng.integers(3, 9))
        label = int(rng.integers(0, 2))
        tokens = rng.integers(2, vocab, size=size)
        k = int(rng.integers(size // 2 + 1, size + 1))
        tokens[rng.choice(size, size=k, replace=False)] = label
        edges = [(i, i + 1) for i in range(size - 1)]
        edges += [tuple(rng.choice(size, 2, replace=False)) for _ in range(size // 3)]
        graphs.append((CsrGraph.from_edges(size, edges), tokens[:, None], label))
    a, b = int(num_graphs * 0.6), int(num_graphs * 0.8)
    return GraphDataset(batch_graphs(graphs[:a]), batch_graphs(graphs[a:b]), batch_graphs(graphs[b:]),
                        vocab, 2)
