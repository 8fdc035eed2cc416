from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from fedgfm.adadpp import PromptSet, build_pool
from fedgfm.data import SyntheticDomainSpec, TextAttributedGraph, synth_collection, synth_domain
from fedgfm.data.split import DataSplit, split
from fedgfm.downstream import (
    EntanglementReport,
    FewShotSpec,
    accuracy,
    cosine_matrix,
    entanglement_diagnostic,
    evaluate,
    few_shot_subsample,
    finetune,
    finetune_grid,
    make_head,
    multitask_auc,
    node_embeddings,
    readout,
    roc_auc,
)
from fedgfm.errors import ContractViolation
from fedgfm.gvqvae import GfmParams, ModelConfig


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def identity_model(d):
    cfg = ModelConfig(d=d, heads=1, tokens=4, nonlinearity="identity")
    p = GfmParams.init(cfg)
    z = np.zeros((d, d))
    return p.with_arrays(**{"enc.0.w_self": np.eye(d), "enc.0.w_nbr": z, "enc.1.w_self": np.eye(d), "enc.1.w_nbr": z})


# ---------------------------------------------------------------------------
# heads


def test_head_shapes():
    assert make_head("node_cls", 16, 7).weight.shape == (16, 7)
    assert make_head("graph_cls_multitask", 16, 128).logits(np.zeros((3, 16))).shape == (3, 128)
    with pytest.raises(ContractViolation):
        make_head("link", 4, 2)


def test_edge_readout_averages_endpoints():
    g = TextAttributedGraph(features=np.zeros((3, 2)), edges=[(0, 2)])
    Z = np.array([[1.0, 2.0], [9.0, 9.0], [3.0, -2.0]])
    assert np.array_equal(readout("edge_cls", Z, g), [[2.0, 0.0]])


# ---------------------------------------------------------------------------
# metrics


def test_auc_examples():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert np.isnan(roc_auc([0.1, 0.2], [1, 1]))


def test_accuracy_perfect_and_empty():
    assert accuracy([1, 2, 0], [1, 2, 0]) == 1.0
    with pytest.raises(ContractViolation):
        accuracy([], [])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 200), st.integers(0, 2**31), st.integers(1, 20))
def test_auc_matches_pairwise_count(n, seed, levels):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, levels, n) / levels  # coarse grid forces ties
    labels = rng.integers(0, 2, n)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    assert roc_auc(scores, labels) == brute_auc(scores.tolist(), labels.tolist())


def test_multitask_auc_masks_nan():
    labels = np.array([[1, np.nan, 0], [0, 1, np.nan], [1, 0, np.nan], [0, np.nan, np.nan]])
    scores = np.array([[0.9, 0.1, 0.3], [0.1, 0.8, 0.2], [0.7, 0.2, 0.1], [0.2, 0.3, 0.4]])
    mean, skipped = multitask_auc(scores, labels)
    assert skipped == [2]
    assert mean == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# fine-tuning


def separable_graph(n=200, d=8, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    w = rng.normal(size=d)
    margin = x @ w
    keep = np.abs(margin) > 0.3
    x, y = x[keep], (margin[keep] > 0).astype(np.int64)
    g = TextAttributedGraph(features=x, edges=np.zeros((0, 2), dtype=np.int64), labels=y, label_level="node", num_classes=2)
    return g


def logistic_oracle_accuracy(x, y):
    def nll(theta):
        z = x @ theta[:-1] + theta[-1]
        return np.sum(np.logaddexp(0, z) - y * z)

    theta = minimize(nll, np.zeros(x.shape[1] + 1), method="L-BFGS-B").x
    return accuracy((x @ theta[:-1] + theta[-1]) > 0, y)


def test_head_matches_logistic_regression_on_separable_labels():
    g = separable_graph()
    gfm = identity_model(8)
    bar = logistic_oracle_accuracy(g.features, g.labels)
    assert bar >= 0.98
    none = np.array([], dtype=np.int64)
    sp = DataSplit(np.arange(g.n), none, none)
    res = finetune(gfm, None, make_head("node_cls", 8, 2), g, sp, lr=0.1, epochs=200, patience=200)
    assert res.train_metric >= 0.98


def test_finetune_freezes_backbone_and_pool():
    g = synth_domain(SyntheticDomainSpec(node_count=60, feature_dim=8, class_count=3, seed=1))
    gfm = GfmParams.init(ModelConfig(d=8, heads=2, tokens=4), 0)
    pool = build_pool([PromptSet.init(k, 2, 8, seed=k) for k in range(2)])
    dg, dp = gfm.digest(), pool.digest()
    sp = split(np.arange(g.n), (0.6, 0.2, 0.2), seed=0, labels=g.labels)
    finetune(gfm, pool, make_head("node_cls", 8, 3), g, sp, epochs=30)
    finetune_grid(gfm, pool, make_head("node_cls", 8, 3), g, sp, grid=(1e-3, 1e-2), epochs=10)
    assert gfm.digest() == dg and pool.digest() == dp


def test_evaluate_order_invariant_and_empty_test():
    g = separable_graph(seed=2)
    gfm = identity_model(8)
    head = make_head("node_cls", 8, 2, seed=1)
    idx = np.arange(g.n)
    rest = np.random.default_rng(0).permutation(idx[10:])
    a = evaluate(gfm, None, head, g, DataSplit(idx[:10], idx[:0], idx[10:]))
    b = evaluate(gfm, None, head, g, DataSplit(idx[:10], idx[:0], rest))
    assert a == b
    with pytest.raises(ContractViolation):
        evaluate(gfm, None, head, g, DataSplit(idx, idx[:0], idx[:0]))


def test_multitask_finetune_notes_empty_columns():
    spec = SyntheticDomainSpec(node_count=8, feature_dim=8, class_count=2, seed=0)
    coll = synth_collection(spec, graph_count=12, task_count=3, missing_rate=0.2, seed=0)
    g = coll.union()
    y = g.labels.copy()
    y[:8, 1] = np.nan
    g = TextAttributedGraph(g.features, g.edges, y, "graph", g.num_classes, batch=g.batch)
    gfm = GfmParams.init(ModelConfig(d=8, heads=1, tokens=4), 0)
    sp = DataSplit(np.arange(8), np.arange(8, 10), np.arange(10, 12))
    res = finetune(gfm, None, make_head("graph_cls_multitask", 8, 3), g, sp, epochs=5)
    assert any("[1]" in n for n in res.head.notes)
    val = evaluate(gfm, None, res.head, g, sp)
    assert np.isnan(val) or 0.0 <= val <= 1.0


# ---------------------------------------------------------------------------
# few-shot


def test_few_shot_counts():
    labels = np.array([0] * 10 + [1] * 10 + [2])
    sp = DataSplit(np.arange(21), np.array([], dtype=np.int64), np.array([], dtype=np.int64))
    sub = few_shot_subsample(sp, labels, FewShotSpec(2, seed=3))
    assert sub.train.size == 5
    assert (labels[sub.train] == 2).sum() == 1
    again = few_shot_subsample(sp, labels, FewShotSpec(2, seed=3))
    assert np.array_equal(sub.train, again.train)


def test_few_shot_rejects_multitask():
    sp = DataSplit(np.arange(3), np.arange(0), np.arange(0))
    with pytest.raises(ContractViolation):
        few_shot_subsample(sp, np.zeros(3), FewShotSpec(1), kind="graph_cls_multitask")
    with pytest.raises(ContractViolation):
        FewShotSpec(0)


# ---------------------------------------------------------------------------
# entanglement


def test_cosine_matrix_limits():
    same = cosine_matrix(np.tile([1.0, 2.0, 3.0], (3, 1)))
    assert np.allclose(same, 1.0)
    ortho = cosine_matrix(np.eye(3))
    assert np.array_equal(ortho, np.eye(3))


def test_report_off_diagonal_mean():
    r = EntanglementReport(["a", "b", "c"], np.eye(3), np.full((3, 3), 0.4) + 0.6 * np.eye(3))
    assert r.mean_off_diagonal("federated") == pytest.approx(0.4)
    assert r.mean_off_diagonal("raw") == 0.0
    assert set(r.tables()) == {"raw_features", "federated"}


def test_diagnostic_orthogonal_domains_with_identity_encoder():
    d = 6
    gfm = identity_model(d)
    graphs = []
    for k in range(3):
        x = np.zeros((4, d))
        x[:, 2 * k : 2 * k + 2] = 1.0
        graphs.append(TextAttributedGraph(features=x, edges=np.zeros((0, 2), dtype=np.int64)))
    r = entanglement_diagnostic(gfm, None, graphs, quantized=False)
    assert r.mean_off_diagonal("federated") == pytest.approx(0.0, abs=1e-12)
    assert r.domains == ["domain0", "domain1", "domain2"]
    with pytest.raises(ContractViolation):
        entanglement_diagnostic(gfm, None, graphs[:1])


def test_node_embeddings_quantized_shape():
    g = synth_domain(SyntheticDomainSpec(node_count=10, feature_dim=8))
    gfm = GfmParams.init(ModelConfig(d=8, heads=2, tokens=4), 0)
    assert node_embeddings(gfm, g, quantized=True).shape == (10, 8)
