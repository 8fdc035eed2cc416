from __future__ import annotations

import math

import numpy as np
import pytest

from fedgfm import tensor as T
from fedgfm.data import SyntheticDomainSpec, TextAttributedGraph, synth_domain
from fedgfm.errors import ContractViolation, DataFormatError, NumericError, SchemaError
from fedgfm.gvqvae import (
    GfmParams,
    ModelConfig,
    decode_features,
    encode,
    load_params,
    local_pretrain_step,
    loss_feat,
    loss_pretrain,
    loss_topo,
    nearest_tokens,
    pretrain_forward,
    quantize,
    save_params,
)

ENC = [f"enc.{l}.{k}" for l in range(2) for k in ("w_self", "w_nbr", "bias")]


def tiny_graph(seed=0, n=6, d=8):
    rng = np.random.default_rng(seed)
    edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)][: max(n, 1)]
    edges = [e for e in edges if max(e) < n]
    return TextAttributedGraph(features=rng.uniform(-1, 1, (n, d)), edges=edges)


def tape_params(params):
    tape = T.Tape()
    return tape, params.on_tape(tape)


# ---------------------------------------------------------------------------
# encoder / decoder


def test_zero_weights_give_zero_embeddings():
    cfg = ModelConfig(d=4, heads=1, tokens=2)
    p = GfmParams.init(cfg)
    p = p.with_arrays(**{k: np.zeros_like(p.arrays[k]) for k in ENC})
    g = tiny_graph(d=4)
    _, P = tape_params(p)
    assert not encode(P, g, cfg).value.any()


def _identity_encoder(cfg, nbr0, nbr1=None, bias0=None):
    d = cfg.d
    p = GfmParams.init(cfg)
    return p.with_arrays(**{
        "enc.0.w_self": np.eye(d),
        "enc.0.w_nbr": nbr0,
        "enc.0.bias": np.zeros(d) if bias0 is None else bias0,
        "enc.1.w_self": np.eye(d),
        "enc.1.w_nbr": np.zeros((d, d)) if nbr1 is None else nbr1,
        "enc.1.bias": np.zeros(d),
    })


def test_isolated_node_keeps_features_plus_bias():
    cfg = ModelConfig(d=3, heads=1, tokens=2, nonlinearity="identity")
    bias = np.array([0.5, -1.0, 2.0])
    p = _identity_encoder(cfg, nbr0=np.random.default_rng(0).normal(size=(3, 3)), bias0=bias)
    x = np.array([[1.0, 2.0, 3.0]])
    g = TextAttributedGraph(features=x, edges=np.zeros((0, 2), dtype=np.int64))
    _, P = tape_params(p)
    assert np.allclose(encode(P, g, cfg).value, x + bias)


def test_star_center_is_self_plus_leaf_mean():
    cfg = ModelConfig(d=2, heads=1, tokens=2, nonlinearity="identity")
    p = _identity_encoder(cfg, nbr0=np.eye(2))
    x = np.array([[1.0, 1.0], [2.0, 0.0], [0.0, 4.0], [-2.0, 2.0]])
    g = TextAttributedGraph(features=x, edges=[(0, 1), (0, 2), (0, 3)])
    _, P = tape_params(p)
    z = encode(P, g, cfg).value
    assert np.allclose(z[0], [1.0 + 0.0, 1.0 + 2.0])


def test_encoder_dimension_mismatch():
    cfg = ModelConfig(d=5, heads=1, tokens=2)
    _, P = tape_params(GfmParams.init(cfg))
    with pytest.raises(ContractViolation):
        encode(P, tiny_graph(d=4), cfg)


def test_decoder_zero_and_identity():
    cfg = ModelConfig(d=3, heads=1, tokens=2, nonlinearity="identity")
    p = GfmParams.init(cfg)
    zq = np.random.default_rng(1).normal(size=(4, 3))
    zero = p.with_arrays(**{k: np.zeros_like(p.arrays[k]) for k in ("dec.w1", "dec.b1", "dec.w2", "dec.b2")})
    _, P = tape_params(zero)
    assert not decode_features(P, zq, cfg).value.any()
    ident = p.with_arrays(**{"dec.w1": np.eye(3), "dec.w2": np.eye(3)})
    _, P = tape_params(ident)
    assert np.array_equal(decode_features(P, zq, cfg).value, zq)


# ---------------------------------------------------------------------------
# quantization


E = np.array([[1.0, 0.0], [0.0, 1.0]])


def test_nearest_token_examples():
    assert nearest_tokens(np.array([[0.9, 0.1]]), E, "cosine")[0].tolist() == [0]
    assert nearest_tokens(np.array([[0.5, 0.5]]), E, "cosine")[0].tolist() == [0]
    assert nearest_tokens(np.array([[3.0, 1.0]]), E, "l2")[0].tolist() == [0]


def test_zero_norm_row_falls_back_to_l2():
    idx, fallbacks = nearest_tokens(np.array([[0.0, 0.0], [0.0, 2.0]]), np.array([[3.0, 0.0], [0.0, 0.5]]), "cosine")
    assert fallbacks == 1
    assert idx.tolist() == [1, 1]


def test_quantize_is_idempotent_on_tokens():
    cfg = ModelConfig(d=4, heads=1, tokens=6)
    p = GfmParams.init(cfg, seed=3).with_arrays(**{"cb.proj": np.eye(4)})
    _, P = tape_params(p)
    q = quantize(P, p.tokens(0), cfg)
    assert q.indices[:, 0].tolist() == list(range(6))
    assert np.array_equal(q.z_q.value, p.tokens(0))


def test_quantize_rejects_non_finite():
    cfg = ModelConfig(d=2, heads=1, tokens=2)
    _, P = tape_params(GfmParams.init(cfg))
    with pytest.raises(NumericError):
        quantize(P, np.array([[np.nan, 0.0]]), cfg)


def test_default_tokens_have_unit_scale():
    p = GfmParams.init(ModelConfig(d=256, heads=2, tokens=64), seed=0)
    norms = np.linalg.norm(p.tokens(0), axis=1)
    assert abs(norms.mean() - 1.0) < 0.05


# ---------------------------------------------------------------------------
# losses


def test_loss_feat_examples():
    x = np.array([[1.0, 0.0], [0.0, 2.0]])
    assert float(loss_feat(x, x, 2.0).value) == pytest.approx(0.0, abs=1e-15)
    assert float(loss_feat(x, x[:, ::-1], 1.0).value) == pytest.approx(1.0)
    # direct numeric evaluation: (1 - 1/sqrt 2)^2
    val = float(loss_feat(np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]]), 2.0).value)
    assert val == pytest.approx(0.085786437626905, abs=1e-12)


def test_loss_topo_examples():
    assert float(loss_topo(np.eye(2), np.zeros((2, 3))).value) == pytest.approx(1.0)
    xh = np.random.default_rng(0).normal(size=(4, 2))
    target = 1.0 / (1.0 + np.exp(-(xh @ xh.T)))
    assert float(loss_topo(target, xh).value) == pytest.approx(0.0, abs=1e-24)


@pytest.mark.parametrize("seed", range(10))
def test_sampled_topology_estimate_close_to_dense(seed):
    spec = SyntheticDomainSpec(node_count=50, feature_dim=4, p_intra=0.3, p_inter=0.05, seed=seed)
    g = synth_domain(spec)
    xh = np.random.default_rng(seed).normal(scale=0.5, size=(50, 4))
    dense = float(loss_topo(None, xh, g, dense_threshold=1000).value)
    est = float(loss_topo(None, xh, g, dense_threshold=10, rng=np.random.default_rng(seed)).value)
    assert abs(est - dense) / dense < 0.15


def test_breakdown_additivity():
    cfg = ModelConfig(d=8, heads=2, tokens=4)
    for seed in range(5):
        b = loss_pretrain(GfmParams.init(cfg, seed), tiny_graph(seed))
        parts = b.feat + b.topo + b.codebook_term + b.beta * b.commitment_term
        assert abs(b.total - parts) <= 1e-10 * abs(b.total)
        assert (b.gamma, b.beta) == (2.0, 0.25)


def test_beta_zero_ignores_commitment():
    p = GfmParams.init(ModelConfig(d=8, heads=2, tokens=4), 1)
    b = loss_pretrain(p, tiny_graph(1), beta=0.0)
    assert b.commitment_term > 0
    assert b.total == pytest.approx(b.feat + b.topo + b.codebook_term, rel=1e-12)


def test_full_gradient_matches_finite_differences():
    cfg = ModelConfig(d=8, heads=2, tokens=4)
    p = GfmParams.init(cfg, seed=1)
    g = tiny_graph(0)
    tape, P = tape_params(p)
    idx = pretrain_forward(P, g, cfg).quantized.indices

    def f(tape, P):
        return pretrain_forward(P, g, cfg, indices=idx).total

    report = T.finite_difference_check(f, p.arrays, eps=1e-5)
    assert report.max_rel_error < 1e-4


def test_nan_feature_names_component():
    cfg = ModelConfig(d=8, heads=2, tokens=4)
    p = GfmParams.init(cfg, seed=1)
    bad = p.with_arrays(**{"dec.b2": np.full(8, np.nan)})
    with pytest.raises(NumericError) as info:
        loss_pretrain(bad, tiny_graph(0))
    assert info.value.component == "decoder"


# ---------------------------------------------------------------------------
# gradient routing


def _routing_grads(p, g, cfg):
    tape, P = tape_params(p)
    fwd = pretrain_forward(P, g, cfg)
    recon = T.add(fwd.feat, fwd.topo)
    rg = T.backward(tape, recon, wrt=[fwd.z, fwd.routed])
    cb = T.backward(tape, fwd.codebook_term)
    cm = T.backward(tape, fwd.commitment_term)
    return fwd, rg, cb, cm


@pytest.mark.parametrize("seed", range(10))
def test_gradient_routing(seed):
    cfg = ModelConfig(d=8, heads=2, tokens=4)
    p = GfmParams.init(cfg, seed)
    g = tiny_graph(seed)
    fwd, rg, cb, cm = _routing_grads(p, g, cfg)
    tok = [f"cb.tokens.{m}" for m in range(cfg.heads)]
    # reconstruction gradient passes the quantizer unchanged
    assert np.array_equal(rg.retained[fwd.z.id], rg.retained[fwd.routed.id])
    # codebook term reaches tokens only, commitment the encoder only
    assert all(not cb[k].any() for k in ENC)
    assert any(cb[k].any() for k in tok)
    assert all(not cm[k].any() for k in tok)
    assert any(cm[k].any() for k in ENC)
    # perturbations across the stop-gradient change nothing
    rng = np.random.default_rng(seed + 100)
    p_tok = p.with_arrays(**{k: p.arrays[k] + 0.01 * rng.normal(size=p.arrays[k].shape) for k in tok})
    p_enc = p.with_arrays(**{k: p.arrays[k] + 0.01 * rng.normal(size=p.arrays[k].shape) for k in ENC})
    _, _, cb2, _ = _routing_grads(p_tok, g, cfg)
    _, _, _, cm2 = _routing_grads(p_enc, g, cfg)
    assert all(np.array_equal(cb[k], cb2[k]) for k in ENC)
    assert all(np.array_equal(cm[k], cm2[k]) for k in tok)


# ---------------------------------------------------------------------------
# local training


def test_zero_learning_rate_keeps_params_bitwise():
    cfg = ModelConfig(d=8, heads=2, tokens=4)
    p = GfmParams.init(cfg, 2)
    res = local_pretrain_step(p, tiny_graph(2), lr=0.0, epochs=2)
    assert res.params.digest() == p.digest()
    assert len(res.history) == 2


def test_local_training_reduces_loss():
    cfg = ModelConfig(d=8, heads=2, tokens=4)
    p = GfmParams.init(cfg, 0)
    res = local_pretrain_step(p, tiny_graph(0), lr=1e-2, epochs=50, optimizer="adam")
    assert not res.aborted
    assert res.history[-1].total < res.history[0].total


def test_local_step_contracts():
    p = GfmParams.init(ModelConfig(d=8, heads=2, tokens=4))
    with pytest.raises(ContractViolation):
        local_pretrain_step(p, tiny_graph(), lr=-1.0, epochs=1)
    with pytest.raises(ContractViolation):
        local_pretrain_step(p, tiny_graph(), lr=0.1, epochs=0)


def test_nan_loss_aborts_with_last_good_state():
    p = GfmParams.init(ModelConfig(d=8, heads=2, tokens=4))
    bad = p.with_arrays(**{"dec.b2": np.full(8, np.inf)})
    res = local_pretrain_step(bad, tiny_graph(), lr=0.1, epochs=3)
    assert res.aborted and res.history == [] and res.error
    assert res.params.digest() == bad.digest()


# ---------------------------------------------------------------------------
# checkpoints


def test_params_round_trip_bitwise(tmp_path):
    p = GfmParams.init(ModelConfig(d=8, heads=2, tokens=4, metric="l2", gamma=1.5), 7)
    save_params(p, tmp_path / "ck")
    back = load_params(tmp_path / "ck")
    assert back.digest() == p.digest()
    assert back.config == p.config


def test_params_schema_errors(tmp_path):
    p = GfmParams.init(ModelConfig(d=4, heads=1, tokens=2))
    save_params(p, tmp_path / "ck")
    manifest = (tmp_path / "ck" / "params.json").read_text()
    (tmp_path / "ck" / "params.json").write_text(manifest.replace("fedgfm-params/1", "fedgfm-params/0"))
    with pytest.raises(SchemaError):
        load_params(tmp_path / "ck")
    (tmp_path / "ck" / "params.json").write_text(manifest)
    raw = tmp_path / "ck" / "params.bin"
    raw.write_bytes(raw.read_bytes()[:-8])
    with pytest.raises(DataFormatError):
        load_params(tmp_path / "ck")


def test_flatten_round_trip():
    p = GfmParams.init(ModelConfig(d=4, heads=3, tokens=5), 1)
    assert p.unflatten(p.flatten()).digest() == p.digest()
    with pytest.raises(ContractViolation):
        p.unflatten(np.zeros(3))
    assert math.isclose(p.arrays["cb.proj"].sum(), 4.0)
