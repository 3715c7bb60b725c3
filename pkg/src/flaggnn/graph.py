"""Graph storage and propagation.

Undirected graphs are held in compressed sparse-row form with every edge
stored in both directions. The GCN propagation operator is the symmetrically
normalized adjacency with one self-loop per node.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from flaggnn.errors import DatasetError, GraphFormatError


@dataclass(frozen=True, eq=False)
class CsrGraph:
    """Symmetric CSR adjacency without self-loops."""

    num_nodes: int
    row_ptr: np.ndarray
    col_idx: np.ndarray

    def __post_init__(self):
        self.row_ptr.setflags(write=False)
        self.col_idx.setflags(write=False)

    @property
    def num_edges(self) -> int:
        return len(self.col_idx) // 2

    def neighbors(self, u: int) -> np.ndarray:
        return self.col_idx[self.row_ptr[u]:self.row_ptr[u + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        rows = np.repeat(np.arange(self.num_nodes), self.degrees())
        a[rows, self.col_idx] = 1.0
        return a

    @classmethod
    def from_edges(cls, num_nodes: int, edges) -> "CsrGraph":
        """Build from an iterable/array of (u, v) pairs.

        Both directions are stored, duplicates collapse and self-loops are
        dropped.
        """
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if len(e) and (e.min() < 0 or e.max() >= num_nodes):
            raise GraphFormatError(f"node index out of range [0, {num_nodes})")
        e = e[e[:, 0] != e[:, 1]]
        both = np.concatenate([e, e[:, ::-1]])
        # unique on a single int64 key gives row-major sorted, deduplicated pairs
        keys = np.unique(both[:, 0] * num_nodes + both[:, 1])
        rows, cols = np.divmod(keys, num_nodes)
        row_ptr = np.zeros(num_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=num_nodes), out=row_ptr[1:])
        return cls(num_nodes, row_ptr, cols.astype(np.int64))

    def edge_list(self) -> np.ndarray:
        """Each undirected edge once, as (u, v) with u < v."""
        rows = np.repeat(np.arange(self.num_nodes), self.degrees())
        keep = rows < self.col_idx
        return np.stack([rows[keep], self.col_idx[keep]], axis=1)


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """D^-1/2 (A + I) D^-1/2 in CSR layout, diagonal always present."""

    num_nodes: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    _matrix: sp.csr_array = field(init=False, repr=False)

    def __post_init__(self):
        for a in (self.row_ptr, self.col_idx, self.values):
            a.setflags(write=False)
        m = sp.csr_array((self.values, self.col_idx, self.row_ptr),
                         shape=(self.num_nodes, self.num_nodes))
        object.__setattr__(self, "_matrix", m)

    def to_dense(self) -> np.ndarray:
        return self._matrix.toarray()

    def get(self, u: int, v: int) -> float:
        lo, hi = self.row_ptr[u], self.row_ptr[u + 1]
        pos = lo + np.searchsorted(self.col_idx[lo:hi], v)
        if pos < hi and self.col_idx[pos] == v:
            return float(self.values[pos])
        return 0.0


def build_normalized_adjacency(g: CsrGraph) -> NormalizedAdjacency:
    n = g.num_nodes
    diag = np.arange(n, dtype=np.int64)
    rows = np.concatenate([np.repeat(diag, g.degrees()), diag])
    cols = np.concatenate([g.col_idx, diag])
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    row_ptr = g.row_ptr + np.arange(n + 1)
    # isolated nodes get degree 1 from the self-loop alone
    inv_sqrt = 1.0 / np.sqrt((g.degrees() + 1).astype(np.float64))
    values = inv_sqrt[rows] * inv_sqrt[cols]
    return NormalizedAdjacency(n, row_ptr, cols, values)


def spmm(s: NormalizedAdjacency, h: np.ndarray) -> np.ndarray:
    """Sparse-dense product S @ H, rows reduced serially."""
    if h.shape[0] != s.num_nodes:
        raise ValueError(f"dimension mismatch: S is {s.num_nodes}x{s.num_nodes}, H has {h.shape[0]} rows")
    return s._matrix @ h


# --------------------------------------------------------------------------- files

def _data_lines(path: Path):
    """Yield (line_number, tokens) for non-blank, non-comment lines."""
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line.split()


def _ints(tokens, count, path, lineno):
    if len(tokens) != count:
        raise GraphFormatError(f"{path}:{lineno}: expected {count} integers, got {len(tokens)}")
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise GraphFormatError(f"{path}:{lineno}: malformed integer in {' '.join(tokens)!r}") from None


def load_graph(path) -> CsrGraph:
    """Read an edge-list file: header "N E" then E lines "u v"."""
    path = Path(path)
    lines = _data_lines(path)
    try:
        lineno, tokens = next(lines)
    except StopIteration:
        raise GraphFormatError(f"{path}: empty file") from None
    n, e = _ints(tokens, 2, path, lineno)
    edges = []
    for lineno, tokens in lines:
        u, v = _ints(tokens, 2, path, lineno)
        for x in (u, v):
            if not 0 <= x < n:
                raise GraphFormatError(f"{path}:{lineno}: node index {x} out of range for N={n}")
        edges.append((u, v))
    if len(edges) != e:
        raise GraphFormatError(f"{path}: header declares {e} edges, found {len(edges)}")
    return CsrGraph.from_edges(n, edges)


def save_graph(path, g: CsrGraph) -> None:
    edges = g.edge_list()
    with open(path, "w") as f:
        f.write(f"{g.num_nodes} {len(edges)}\n")
        for u, v in edges:
            f.write(f"{u} {v}\n")


def load_features(path) -> np.ndarray:
    path = Path(path)
    lines = _data_lines(path)
    try:
        lineno, tokens = next(lines)
    except StopIteration:
        raise GraphFormatError(f"{path}: empty file") from None
    n, d = _ints(tokens, 2, path, lineno)
    x = np.empty((n, d))
    i = 0
    for lineno, tokens in lines:
        if i >= n:
            raise GraphFormatError(f"{path}:{lineno}: more than {n} feature rows")
        if len(tokens) != d:
            raise GraphFormatError(f"{path}:{lineno}: expected {d} values, got {len(tokens)}")
        try:
            x[i] = [float(t) for t in tokens]
        except ValueError:
            raise GraphFormatError(f"{path}:{lineno}: malformed float") from None
        i += 1
    if i != n:
        raise GraphFormatError(f"{path}: header declares {n} rows, found {i}")
    if not np.all(np.isfinite(x)):
        raise GraphFormatError(f"{path}: non-finite feature value")
    return x


def save_features(path, x: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write(f"{x.shape[0]} {x.shape[1]}\n")
        for row in x:
            f.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_labels(path, num_nodes: int | None = None) -> np.ndarray:
    path = Path(path)
    labels = []
    for lineno, tokens in _data_lines(path):
        labels.append(_ints(tokens, 1, path, lineno)[0])
    y = np.asarray(labels, dtype=np.int64)
    if num_nodes is not None and len(y) != num_nodes:
        raise DatasetError(f"{path}: expected {num_nodes} labels, found {len(y)}")
    if len(y) and y.min() < 0:
        raise DatasetError(f"{path}: negative class id")
    return y


def save_labels(path, y: np.ndarray) -> None:
    with open(path, "w") as f:
        f.writelines(f"{int(c)}\n" for c in y)


# --------------------------------------------------------------------------- splits

@dataclass(frozen=True, eq=False)
class NodeSplit:
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self):
        if np.any(self.train_mask & self.val_mask) or np.any(self.train_mask & self.test_mask) \
                or np.any(self.val_mask & self.test_mask):
            raise DatasetError("overlapping splits")

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.train_mask

    @property
    def unlabeled_mask(self) -> np.ndarray:
        return ~self.train_mask

    @classmethod
    def from_indices(cls, num_nodes: int, train, val, test) -> "NodeSplit":
        masks = []
        for idx in (train, val, test):
            idx = np.asarray(idx, dtype=np.int64)
            if len(idx) and (idx.min() < 0 or idx.max() >= num_nodes):
                raise DatasetError(f"split index out of range for N={num_nodes}")
            m = np.zeros(num_nodes, dtype=bool)
            m[idx] = True
            masks.append(m)
        return cls(*masks)


_SECTIONS = ("train", "val", "test")


def load_split(path, num_nodes: int) -> NodeSplit:
    """Read a split file with "train", "val" and "test" section headers."""
    path = Path(path)
    sections: dict[str, list[int]] = {}
    current = None
    for lineno, tokens in _data_lines(path):
        if len(tokens) == 1 and tokens[0] in _SECTIONS:
            current = tokens[0]
            if current in sections:
                raise GraphFormatError(f"{path}:{lineno}: duplicate section {current!r}")
            sections[current] = []
            continue
        if current is None:
            raise GraphFormatError(f"{path}:{lineno}: index before any section header")
        idx = _ints(tokens, 1, path, lineno)[0]
        if not 0 <= idx < num_nodes:
            raise DatasetError(f"{path}:{lineno}: node index {idx} out of range for N={num_nodes}")
        sections[current].append(idx)
    missing = [s for s in _SECTIONS if s not in sections]
    if missing:
        raise GraphFormatError(f"{path}: missing section(s) {', '.join(missing)}")
    return NodeSplit.from_indices(num_nodes, *(sections[s] for s in _SECTIONS))


def save_split(path, split: NodeSplit) -> None:
    with open(path, "w") as f:
        for name, mask in zip(_SECTIONS, (split.train_mask, split.val_mask, split.test_mask)):
            f.write(name + "\n")
            f.writelines(f"{i}\n" for i in np.flatnonzero(mask))


# --------------------------------------------------------------------------- batching

@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Disjoint union of graphs for whole-graph classification."""

    graph: CsrGraph
    features: np.ndarray
    graph_id: np.ndarray
    num_graphs: int
    labels: np.ndarray
    adjacency: NormalizedAdjacency = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "adjacency", build_normalized_adjacency(self.graph))

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    def node_offsets(self) -> np.ndarray:
        counts = np.bincount(self.graph_id, minlength=self.num_graphs)
        return np.concatenate([[0], np.cumsum(counts)])


def batch_graphs(graphs: Sequence[tuple[CsrGraph, np.ndarray, int]]) -> GraphBatch:
    if not graphs:
        raise ValueError("cannot batch an empty list of graphs")
    dims = {f.shape[1] for _, f, _ in graphs}
    if len(dims) != 1:
        raise ValueError(f"feature-dim mismatch across graphs: {sorted(dims)}")
    offset = 0
    row_ptrs, cols, ids = [np.zeros(1, dtype=np.int64)], [], []
    for gid, (g, f, _) in enumerate(graphs):
        if f.shape[0] != g.num_nodes:
            raise ValueError(f"graph {gid}: {g.num_nodes} nodes but {f.shape[0]} feature rows")
        row_ptrs.append(g.row_ptr[1:] + row_ptrs[-1][-1])
        cols.append(g.col_idx + offset)
        ids.append(np.full(g.num_nodes, gid, dtype=np.int64))
        offset += g.num_nodes
    merged = CsrGraph(offset, np.concatenate(row_ptrs), np.concatenate(cols))
    return GraphBatch(
        graph=merged,
        features=np.concatenate([f for _, f, _ in graphs]),
        graph_id=np.concatenate(ids),
        num_graphs=len(graphs),
        labels=np.asarray([y for _, _, y in graphs], dtype=np.int64),
    )


def unbatch_graphs(batch: GraphBatch) -> list[tuple[CsrGraph, np.ndarray, int]]:
    out = []
    offs = batch.node_offsets()
    g = batch.graph
    for k in range(batch.num_graphs):
        lo, hi = offs[k], offs[k + 1]
        row_ptr = g.row_ptr[lo:hi + 1] - g.row_ptr[lo]
        col_idx = g.col_idx[g.row_ptr[lo]:g.row_ptr[hi]] - lo
        out.append((CsrGraph(int(hi - lo), row_ptr.copy(), col_idx.copy()),
                    batch.features[lo:hi], int(batch.labels[k])))
    return out
