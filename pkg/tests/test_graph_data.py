from __future__ import annotations

import itertools
import json

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgfm.data import (
    GraphCollection,
    SyntheticDomainSpec,
    TextAttributedGraph,
    client_subgraphs,
    degree_distribution,
    load_any,
    load_collection,
    load_graph,
    louvain_communities,
    louvain_partition,
    modularity,
    random_allocate,
    save_collection,
    save_graph,
    split,
    split_preset,
    synth_collection,
    synth_domain,
)
from fedgfm.errors import ContractViolation, DataFormatError, ValidationError


def graph(n, edges, d=4, **kw):
    return TextAttributedGraph(features=np.zeros((n, d)), edges=np.asarray(edges, dtype=np.int64).reshape(-1, 2), **kw)


def two_cliques():
    a = list(itertools.combinations(range(5), 2))
    b = list(itertools.combinations(range(5, 10), 2))
    return graph(10, a + b + [(4, 5)])


# ---------------------------------------------------------------------------
# graph type


def test_dangling_edge_rejected():
    with pytest.raises(ValidationError):
        graph(3, [(5, 0)])


def test_duplicate_undirected_edge_rejected():
    with pytest.raises(ValidationError):
        graph(3, [(0, 1), (1, 0)])


def test_degree_distribution_examples():
    assert degree_distribution(graph(3, [(0, 1), (1, 2)])) == {1: 2, 2: 1}
    assert degree_distribution(graph(5, [])) == {0: 5}
    assert degree_distribution(graph(5, [(0, 1), (0, 2), (0, 3), (0, 4)])) == {1: 4, 4: 1}


def test_degree_distribution_cap():
    star = graph(6, [(0, i) for i in range(1, 6)])
    assert degree_distribution(star, max_degree=3) == {1: 5}


def test_induced_subgraph_drops_cross_edges():
    g = graph(4, [(0, 1), (1, 2), (2, 3)], labels=np.arange(4), label_level="node", num_classes=4)
    sub, dropped = g.induced_subgraph(np.array([0, 1]))
    assert sub.n == 2 and sub.num_edges == 1 and dropped == 2  # (1,2) and (2,3)
    assert sub.labels.tolist() == [0, 1]


def test_mean_aggregator_rows_average_neighbours():
    g = graph(3, [(0, 1), (0, 2)])
    agg = g.mean_aggregator().toarray()
    assert np.allclose(agg, [[0, 0.5, 0.5], [1, 0, 0], [1, 0, 0]])


def test_collection_requires_uniform_dimension():
    with pytest.raises(ContractViolation):
        GraphCollection([graph(2, [], d=3), graph(2, [], d=4)])


def test_collection_union_batches_graph_labels():
    spec = SyntheticDomainSpec(node_count=12, class_count=2, feature_dim=8, seed=3)
    coll = synth_collection(spec, graph_count=4, task_count=5, missing_rate=0.3, seed=1)
    u = coll.union()
    assert u.num_graphs == 4
    assert u.labels.shape == (4, 5)
    assert [b.size for b in u.graph_blocks()] == [12] * 4


# ---------------------------------------------------------------------------
# containers


def test_container_round_trip_bitwise(tmp_path):
    spec = SyntheticDomainSpec(node_count=30, feature_dim=6, edge_feature_dim=2, seed=5)
    g = synth_domain(spec)
    save_graph(g, tmp_path / "g")
    back = load_graph(tmp_path / "g")
    assert back.equals(g)
    assert back.digest() == g.digest()
    assert np.array_equal(back.features, g.features)


def test_container_counts_echo_manifest(tmp_path):
    g = graph(3, [(0, 1), (1, 2)])
    save_graph(g, tmp_path / "c")
    m = json.loads((tmp_path / "c" / "manifest").read_text())
    back = load_graph(tmp_path / "c")
    assert (back.n, back.d, back.num_edges) == (m["n"], m["d"], m["num_edges"]) == (3, 4, 2)


def test_truncated_feature_file_reports_offset(tmp_path):
    save_graph(graph(3, [(0, 1)]), tmp_path / "c")
    f = tmp_path / "c" / "features.bin"
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(DataFormatError) as info:
        load_graph(tmp_path / "c")
    assert info.value.offset == 44
    assert "byte offset 44" in str(info.value)


def test_dangling_edge_in_container(tmp_path):
    save_graph(graph(3, [(0, 1)]), tmp_path / "c")
    np.array([5, 0], dtype="<u4").tofile(tmp_path / "c" / "edges.bin")
    with pytest.raises(ValidationError):
        load_graph(tmp_path / "c")


def test_corrupt_manifest(tmp_path):
    save_graph(graph(3, [(0, 1)]), tmp_path / "c")
    (tmp_path / "c" / "manifest").write_text("{not json")
    with pytest.raises(DataFormatError):
        load_graph(tmp_path / "c")


def test_collection_round_trip_keeps_missing_labels(tmp_path):
    spec = SyntheticDomainSpec(node_count=10, class_count=2, feature_dim=4, seed=0)
    coll = synth_collection(spec, 3, 6, missing_rate=0.5, seed=2)
    save_collection(coll, tmp_path / "col")
    back = load_any(tmp_path / "col")
    assert isinstance(back, GraphCollection)
    a, b = coll.union().labels, back.union().labels
    assert np.array_equal(np.isnan(a), np.isnan(b))
    assert np.array_equal(np.nan_to_num(a, nan=-1), np.nan_to_num(b, nan=-1))
    assert len(load_collection(tmp_path / "col")) == 3


# ---------------------------------------------------------------------------
# synthetic generator


def test_synth_deterministic():
    spec = SyntheticDomainSpec(node_count=50, seed=9)
    assert synth_domain(spec).equals(synth_domain(spec))


def test_synth_forced_blocks_are_components():
    spec = SyntheticDomainSpec(node_count=10, block_sizes=[5, 5], class_count=2, p_intra=1.0, p_inter=0.0)
    g = synth_domain(spec)
    G = nx.Graph(g.edges.tolist())
    assert sorted(sorted(c) for c in nx.connected_components(G)) == [list(range(5)), list(range(5, 10))]


def test_synth_zero_covariance_identical_class_features():
    g = synth_domain(SyntheticDomainSpec(node_count=12, class_count=3, cov_scale=0.0, seed=1))
    for c in range(3):
        rows = g.features[g.labels == c]
        assert (rows == rows[0]).all()


def test_synth_spec_validation():
    with pytest.raises(ContractViolation):
        SyntheticDomainSpec(node_count=10, block_sizes=[3, 3])
    with pytest.raises(ContractViolation):
        SyntheticDomainSpec(p_intra=1.5)


def test_row_normalised_features_have_unit_norm():
    g = synth_domain(SyntheticDomainSpec(node_count=20, feature_dim=8, row_normalize=True))
    assert np.allclose(np.linalg.norm(g.features, axis=1), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# Louvain


def test_modularity_matches_networkx():
    g = synth_domain(SyntheticDomainSpec(node_count=60, p_intra=0.3, p_inter=0.02, seed=4))
    labels = louvain_communities(g.n, g.edges, seed=0)
    G = nx.Graph()
    G.add_nodes_from(range(g.n))
    G.add_edges_from(g.edges.tolist())
    comms = [set(np.flatnonzero(labels == c).tolist()) for c in np.unique(labels)]
    assert modularity(g.n, g.edges, labels) == pytest.approx(nx.community.modularity(G, comms), abs=1e-12)


def test_two_cliques_recovered_and_exhaustively_optimal():
    g = two_cliques()
    part = louvain_partition(g, 2, seed=0)
    groups = sorted(sorted(part.members(k).tolist()) for k in range(2))
    assert groups == [list(range(5)), list(range(5, 10))]
    best = max(
        modularity(10, g.edges, np.array([(mask >> i) & 1 for i in range(10)]))
        for mask in range(1, 2**9)
    )
    assert modularity(10, g.edges, part.assignment) == pytest.approx(best, abs=1e-12)


def _set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for p in _set_partitions(rest):
        for i in range(len(p)):
            yield p[:i] + [[first] + p[i]] + p[i + 1 :]
        yield [[first]] + p


def test_complete_graph_single_community():
    k4 = list(itertools.combinations(range(4), 2))
    labels = louvain_communities(4, k4, seed=0)
    assert len(set(labels.tolist())) == 1
    scores = []
    for p in _set_partitions(list(range(4))):
        lab = np.empty(4, dtype=int)
        for c, block in enumerate(p):
            lab[block] = c
        scores.append((modularity(4, np.array(k4), lab), len(p)))
    best = max(scores)
    assert best[1] == 1


def test_louvain_k1_holds_everything():
    g = two_cliques()
    part = louvain_partition(g, 1)
    assert part.sizes().tolist() == [10]


def test_louvain_too_many_clients():
    with pytest.raises(ContractViolation):
        louvain_partition(graph(3, [(0, 1)]), 4)


def test_louvain_splits_when_communities_are_few():
    g = two_cliques()
    part = louvain_partition(g, 4, seed=0)
    assert (part.sizes() > 0).all() and part.sizes().sum() == 10


@pytest.mark.parametrize("seed", range(5))
def test_louvain_modularity_trace_non_decreasing(seed):
    g = synth_domain(SyntheticDomainSpec(node_count=80, block_sizes=[20, 20, 20, 20], class_count=4, p_intra=0.3, p_inter=0.02, seed=seed))
    trace = []
    louvain_communities(g.n, g.edges, seed=seed, trace=trace)
    assert len(trace) >= 2
    assert all(b >= a - 1e-12 for a, b in zip(trace, trace[1:]))


def test_client_subgraphs_cover_nodes():
    g = synth_domain(SyntheticDomainSpec(node_count=90, seed=2))
    part = louvain_partition(g, 3, seed=0)
    subs, dropped = client_subgraphs(g, part)
    assert sum(s.n for s in subs) == 90
    assert sum(s.num_edges for s in subs) + dropped == g.num_edges


# ---------------------------------------------------------------------------
# random allocation and splits


def test_random_allocate_sizes():
    assert sorted(random_allocate(6, 3, seed=0).sizes().tolist()) == [2, 2, 2]
    sizes = random_allocate(7, 3, seed=0).sizes()
    assert sizes.max() - sizes.min() <= 1
    assert np.array_equal(random_allocate(7, 3, seed=4).assignment, random_allocate(7, 3, seed=4).assignment)


def test_random_allocate_too_few():
    with pytest.raises(ContractViolation):
        random_allocate(2, 3)


def test_split_wikics_and_cora_sizes():
    assert split(np.arange(100), split_preset("wikics"), seed=0).sizes() == (80, 10, 10)
    labels = np.random.default_rng(0).integers(0, 7, 2708)
    sp = split(np.arange(2708), split_preset("cora"), seed=0, labels=labels)
    assert sp.sizes() == (135, 541, 1083)


def test_split_all_train_boundary():
    sp = split(np.arange(17), (1.0, 0.0, 0.0), seed=0)
    assert sp.sizes() == (17, 0, 0)


def test_split_warns_for_class_absent_from_train():
    labels = np.array([0] * 50 + [1])
    sp = split(np.arange(51), (0.5, 0.25, 0.25), seed=0, labels=labels)
    assert sp.warnings


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(10, 300),
    classes=st.integers(1, 6),
    r=st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)),
    seed=st.integers(0, 1000),
)
def test_split_properties(n, classes, r, seed):
    total = sum(r)
    ratios = tuple(x / total for x in r) if total > 1 else r
    labels = np.random.default_rng(seed).integers(0, classes, n)
    sp = split(np.arange(n), ratios, seed=seed, labels=labels)
    parts = [sp.train, sp.val, sp.test]
    for part, ratio in zip(parts, ratios):
        assert part.size == int(np.floor(ratio * n + 1e-9))
        # per-class counts within one of the proportional share
        for c in range(classes):
            members = int((labels == c).sum())
            got = int((labels[part] == c).sum())
            assert abs(got - ratio * members) < 1 + 1e-9 or members == 0
    assert len(set(np.concatenate(parts).tolist())) == sum(p.size for p in parts)
