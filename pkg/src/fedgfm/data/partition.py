"""Simulated decentralisation: Louvain for subgraph-level, random allocation for graph-level."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractViolation
from .graph import GraphCollection, TextAttributedGraph


@dataclass
class PartitionAssignment:
    """Element (node or graph index) -> client id."""

    client_count: int
    assignment: np.ndarray
    level: str = "subgraph"
    seed: int | None = None
    communities: np.ndarray | None = None
    modularity_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.client_count < 1:
            raise ContractViolation("client count must be at least 1")
        if self.assignment.size and (self.assignment.min() < 0 or self.assignment.max() >= self.client_count):
            raise ContractViolation("client id out of range")
        sizes = self.sizes()
        if (sizes == 0).any():
            raise ContractViolation(f"client(s) {np.flatnonzero(sizes == 0).tolist()} received no elements")

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.client_count)

    def members(self, client: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == client)


# ---------------------------------------------------------------------------
# Louvain


def modularity(n: int, edges: np.ndarray, labels, weights=None, resolution: float = 1.0) -> float:
    """Newman modularity of ``labels`` on an undirected (multi)graph.

    Self-loops count once toward intra weight and twice toward degree.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    w = np.ones(edges.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    m = w.sum()
    if m == 0:
        return 0.0
    labels = np.asarray(labels)
    deg = np.zeros(n)
    np.add.at(deg, edges[:, 0], w)
    np.add.at(deg, edges[:, 1], w)
    same = labels[edges[:, 0]] == labels[edges[:, 1]]
    _, comm = np.unique(labels, return_inverse=True)
    intra = np.bincount(comm[edges[same, 0]], weights=w[same], minlength=comm.max() + 1)
    tot = np.bincount(comm, weights=deg, minlength=comm.max() + 1)
    return float(np.sum(intra / m - resolution * (tot / (2 * m)) ** 2))


class _WeightedGraph:
    def __init__(self, n: int, edges: np.ndarray, weights: np.ndarray):
        self.n = n
        self.adj: list[dict[int, float]] = [defaultdict(float) for _ in range(n)]
        self.loops = np.zeros(n)
        self.degree = np.zeros(n)
        for (u, v), w in zip(edges.tolist(), weights.tolist()):
            if u == v:
                self.loops[u] += w
                self.degree[u] += 2 * w
            else:
                self.adj[u][v] += w
                self.adj[v][u] += w
                self.degree[u] += w
                self.degree[v] += w
        self.m = float(weights.sum())

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        es, ws = [], []
        for u in range(self.n):
            if self.loops[u]:
                es.append((u, u))
                ws.append(self.loops[u])
            for v, w in self.adj[u].items():
                if u < v:
                    es.append((u, v))
                    ws.append(w)
        return np.asarray(es, dtype=np.int64).reshape(-1, 2), np.asarray(ws, dtype=np.float64)


def _move_nodes(g: _WeightedGraph, comm: np.ndarray, rng, resolution: float, trace: list[float]) -> bool:
    """Local moving phase. Returns True if any node changed community."""
    m2 = 2.0 * g.m
    tot = np.bincount(comm, weights=g.degree, minlength=g.n).astype(np.float64)
    moved_any = False
    edges, ws = g.edge_arrays()
    while True:
        moved = 0
        for u in rng.permutation(g.n):
            cu = comm[u]
            ku = g.degree[u]
            links: dict[int, float] = defaultdict(float)
            for v, w in g.adj[u].items():
                links[comm[v]] += w
            tot[cu] -= ku
            # gain of inserting u into c, up to a term common to every c
            best_c = cu
            best_gain = links.get(cu, 0.0) - resolution * tot[cu] * ku / m2
            for c, w in sorted(links.items()):
                gain = w - resolution * tot[c] * ku / m2
                if gain > best_gain + 1e-12:
                    best_c, best_gain = c, gain
            tot[best_c] += ku
            if best_c != cu:
                comm[u] = best_c
                moved += 1
        q = modularity(g.n, edges, comm, ws, resolution)
        if trace and q < trace[-1] - 1e-12:
            raise AssertionError(f"modularity decreased during a sweep: {trace[-1]} -> {q}")
        trace.append(q)
        if moved == 0:
            return moved_any
        moved_any = True


def louvain_communities(
    n: int, edges, seed: int = 0, resolution: float = 1.0, trace: list[float] | None = None
) -> np.ndarray:
    """Community label per node (labels are 0..C-1, ordered by smallest member)."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rng = np.random.default_rng(seed)
    trace = [] if trace is None else trace
    node_comm = np.arange(n)
    g = _WeightedGraph(n, edges, np.ones(edges.shape[0]))
    if g.m == 0:
        return node_comm
    while True:
        comm = np.arange(g.n)
        changed = _move_nodes(g, comm, rng, resolution, trace)
        if not changed:
            break
        _, comm = np.unique(comm, return_inverse=True)
        node_comm = comm[node_comm]
        es, ws = g.edge_arrays()
        new_edges = comm[es]
        lo = np.minimum(new_edges[:, 0], new_edges[:, 1])
        hi = np.maximum(new_edges[:, 0], new_edges[:, 1])
        g = _WeightedGraph(int(comm.max()) + 1, np.stack([lo, hi], axis=1), ws)
    return _canonical(node_comm)


def _canonical(labels: np.ndarray) -> np.ndarray:
    order = {}
    out = np.empty_like(labels)
    for i, c in enumerate(labels.tolist()):
        out[i] = order.setdefault(c, len(order))
    return out


def assign_communities(communities: np.ndarray, client_count: int) -> np.ndarray:
    """Greedy balance: largest community first, each to the currently smallest client.

    If there are fewer communities than clients, the largest community is cut
    in half (by node index) until there are enough.
    """
    groups = [np.flatnonzero(communities == c) for c in range(int(communities.max()) + 1)]
    if sum(g.size for g in groups) < client_count:
        raise ContractViolation("more clients than elements")
    while len(groups) < client_count:
        groups.sort(key=lambda g: (-g.size, g[0]))
        big = groups.pop(0)
        half = big.size // 2
        groups += [big[:half], big[half:]]
    groups.sort(key=lambda g: (-g.size, g[0]))
    load = np.zeros(client_count, dtype=np.int64)
    out = np.empty(communities.size, dtype=np.int64)
    for g in groups:
        k = int(np.argmin(load))
        out[g] = k
        load[k] += g.size
    return out


def louvain_partition(graph: TextAttributedGraph, client_count: int, seed: int = 0) -> PartitionAssignment:
    if client_count < 1:
        raise ContractViolation("client count must be at least 1")
    if client_count > graph.n:
        raise ContractViolation(f"{client_count} clients requested for a {graph.n}-node graph")
    trace: list[float] = []
    comm = louvain_communities(graph.n, graph.edges, seed=seed, trace=trace)
    return PartitionAssignment(
        client_count=client_count,
        assignment=assign_communities(comm, client_count),
        level="subgraph",
        seed=seed,
        communities=comm,
        modularity_trace=trace,
    )


def random_allocate(collection: GraphCollection | int, client_count: int, seed: int = 0) -> PartitionAssignment:
    """Shuffle then cut into near-equal contiguous chunks."""
    size = collection if isinstance(collection, int) else len(collection)
    if size < client_count:
        raise ContractViolation(f"{size} graphs cannot be spread over {client_count} clients")
    perm = np.random.default_rng(seed).permutation(size)
    assignment = np.empty(size, dtype=np.int64)
    for k, chunk in enumerate(np.array_split(perm, client_count)):
        assignment[chunk] = k
    return PartitionAssignment(client_count, assignment, level="graph", seed=seed)


def client_subgraphs(graph: TextAttributedGraph, part: PartitionAssignment) -> tuple[list[TextAttributedGraph], int]:
    """Induced subgraph per client, plus the number of dropped cross-client edges."""
    subs, dropped = [], 0
    for k in range(part.client_count):
        sub, _ = graph.induced_subgraph(part.members(k))
        subs.append(sub)
    kept = sum(s.num_edges for s in subs)
    dropped = graph.num_edges - kept
    return subs, dropped


def client_collections(collection: GraphCollection, part: PartitionAssignment) -> list[GraphCollection]:
    return [collection.subset(part.members(k)) for k in range(part.client_count)]
