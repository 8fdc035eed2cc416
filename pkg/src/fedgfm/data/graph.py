"""Graph containers: a single text-attributed graph and a collection of them."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..errors import ContractViolation, ValidationError

LABEL_LEVELS = ("node", "edge", "graph", "none")


@dataclass
class TextAttributedGraph:
    """Undirected graph with dense node features and labels at one level.

    ``edges`` is an (E, 2) integer array with every undirected edge stored
    once. ``features`` is float32 so that containers round-trip bitwise.
    Graph-level labels are float with NaN marking a missing task label; a
    disjoint union of several graphs keeps them as a (G, t) matrix plus a
    per-node ``batch`` vector.
    """

    features: np.ndarray
    edges: np.ndarray
    labels: np.ndarray | None = None
    label_level: str = "none"
    num_classes: int = 0
    edge_features: np.ndarray | None = None
    domain_tag: str = ""
    batch: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.edges = np.ascontiguousarray(np.asarray(self.edges, dtype=np.int64).reshape(-1, 2))
        if self.edge_features is not None:
            self.edge_features = np.ascontiguousarray(self.edge_features, dtype=np.float32)
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
        self.validate()

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def num_graphs(self) -> int:
        return 1 if self.batch is None else int(self.batch.max()) + 1 if self.n else 0

    def validate(self) -> None:
        if self.features.ndim != 2:
            raise ValidationError("node features must be an n x d matrix")
        if self.label_level not in LABEL_LEVELS:
            raise ValidationError(f"unknown label level {self.label_level!r}")
        n = self.n
        if self.num_edges:
            bad = (self.edges < 0) | (self.edges >= n)
            if bad.any():
                row = int(np.argwhere(bad.any(axis=1))[0, 0])
                u, v = self.edges[row]
                raise ValidationError(f"edge {row} = ({u}, {v}) has an endpoint outside [0, {n})")
            lo = np.minimum(self.edges[:, 0], self.edges[:, 1])
            hi = np.maximum(self.edges[:, 0], self.edges[:, 1])
            keys = lo * n + hi
            if np.unique(keys).size != keys.size:
                raise ValidationError("duplicate undirected edge")
        if self.edge_features is not None and self.edge_features.shape[0] != self.num_edges:
            raise ValidationError("edge feature rows must equal the edge count")
        if self.labels is not None:
            if self.label_level == "node" and self.labels.shape[0] != n:
                raise ValidationError("node labels must have length n")
            if self.label_level == "edge" and self.labels.shape[0] != self.num_edges:
                raise ValidationError("edge labels must have length |E|")
        if self.batch is not None and self.batch.shape[0] != n:
            raise ValidationError("batch vector must have length n")

    # -- derived structure ---------------------------------------------------

    def adjacency(self) -> np.ndarray:
        """Dense symmetric 0/1 adjacency."""
        a = np.zeros((self.n, self.n))
        if self.num_edges:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=np.int64)
        if self.num_edges:
            np.add.at(deg, self.edges[:, 0], 1)
            np.add.at(deg, self.edges[:, 1], 1)
        return deg

    def mean_aggregator(self) -> sp.csr_matrix:
        """Row-normalised adjacency; rows of isolated nodes are zero."""
        if "mean_agg" not in self._cache:
            a = self.sparse_adjacency()
            deg = np.asarray(a.sum(axis=1)).ravel()
            inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
            self._cache["mean_agg"] = sp.diags(inv) @ a
        return self._cache["mean_agg"]

    def sparse_adjacency(self) -> sp.csr_matrix:
        if self.num_edges == 0:
            return sp.csr_matrix((self.n, self.n))
        u, v = self.edges[:, 0], self.edges[:, 1]
        off = u != v
        rows = np.concatenate([u, v[off]])
        cols = np.concatenate([v, u[off]])
        return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(self.n, self.n))

    def edge_mean_aggregator(self) -> sp.csr_matrix:
        """(n, |E|) map averaging incident edge features into each endpoint."""
        if "edge_agg" not in self._cache:
            u, v = self.edges[:, 0], self.edges[:, 1]
            off = u != v
            rows = np.concatenate([u, v[off]])
            cols = np.concatenate([np.arange(self.num_edges), np.arange(self.num_edges)[off]])
            inc = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(self.n, self.num_edges))
            deg = np.asarray(inc.sum(axis=1)).ravel()
            inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
            self._cache["edge_agg"] = sp.diags(inv) @ inc
        return self._cache["edge_agg"]

    def graph_blocks(self) -> list[np.ndarray]:
        """Node index arrays of each member graph (one block unless batched)."""
        if self.batch is None:
            return [np.arange(self.n)]
        return [np.flatnonzero(self.batch == g) for g in range(self.num_graphs)]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.features, self.edges, self.labels, self.edge_features, self.batch):
            if arr is not None:
                h.update(str(arr.dtype).encode())
                h.update(str(arr.shape).encode())
                h.update(np.ascontiguousarray(arr).tobytes())
        h.update(f"{self.label_level}|{self.num_classes}|{self.domain_tag}".encode())
        return h.hexdigest()

    def equals(self, other: "TextAttributedGraph") -> bool:
        """Bitwise equality of every stored array and descriptor."""
        return self.digest() == other.digest()

    def induced_subgraph(self, nodes) -> tuple["TextAttributedGraph", int]:
        """Subgraph on ``nodes`` (kept in ascending order) and the count of dropped edges."""
        nodes = np.unique(np.asarray(nodes, dtype=np.int64))
        remap = np.full(self.n, -1, dtype=np.int64)
        remap[nodes] = np.arange(nodes.size)
        if self.num_edges:
            keep = (remap[self.edges[:, 0]] >= 0) & (remap[self.edges[:, 1]] >= 0)
        else:
            keep = np.zeros(0, dtype=bool)
        edges = remap[self.edges[keep]]
        labels = self.labels
        if labels is not None:
            if self.label_level == "node":
                labels = labels[nodes]
            elif self.label_level == "edge":
                labels = labels[keep]
        sub = TextAttributedGraph(
            features=self.features[nodes],
            edges=edges,
            labels=labels,
            label_level=self.label_level,
            num_classes=self.num_classes,
            edge_features=None if self.edge_features is None else self.edge_features[keep],
            domain_tag=self.domain_tag,
        )
        return sub, int(self.num_edges - keep.sum())


def degree_distribution(graph: TextAttributedGraph, max_degree: int | None = None) -> dict[int, int]:
    """Histogram degree -> node count. A self-loop adds 2 to its node's degree."""
    counts = Counter(int(d) for d in graph.degrees())
    hist = dict(sorted(counts.items()))
    if max_degree is not None:
        hist = {k: v for k, v in hist.items() if k <= max_degree}
    return hist


@dataclass
class GraphCollection:
    """Graphs sharing feature dimension and label arity (graph-level setting)."""

    graphs: list[TextAttributedGraph]

    def __post_init__(self):
        if not self.graphs:
            raise ContractViolation("a graph collection must be non-empty")
        d = {g.d for g in self.graphs}
        if len(d) != 1:
            raise ContractViolation(f"graphs disagree on feature dimension: {sorted(d)}")
        levels = {g.label_level for g in self.graphs}
        if len(levels) != 1:
            raise ContractViolation("graphs disagree on label level")

    def __len__(self) -> int:
        return len(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]

    @property
    def d(self) -> int:
        return self.graphs[0].d

    def subset(self, idx) -> "GraphCollection":
        return GraphCollection([self.graphs[i] for i in idx])

    def union(self) -> TextAttributedGraph:
        """Disjoint union with a batch vector; graph labels stacked to (G, t)."""
        offs = np.cumsum([0] + [g.n for g in self.graphs])
        edges = np.concatenate([g.edges + o for g, o in zip(self.graphs, offs)]) if self.graphs else None
        has_ef = all(g.edge_features is not None for g in self.graphs)
        first = self.graphs[0]
        labels = None
        if first.labels is not None and first.label_level == "graph":
            labels = np.stack([np.asarray(g.labels, dtype=np.float32).reshape(-1) for g in self.graphs])
        return TextAttributedGraph(
            features=np.concatenate([g.features for g in self.graphs]),
            edges=edges,
            labels=labels,
            label_level=first.label_level if labels is not None else "none",
            num_classes=first.num_classes,
            edge_features=np.concatenate([g.edge_features for g in self.graphs]) if has_ef else None,
            domain_tag=first.domain_tag,
            batch=np.repeat(np.arange(len(self.graphs)), [g.n for g in self.graphs]),
        )
