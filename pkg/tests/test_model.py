import numpy as np
import pytest

from mlaforge.convert import convert
from mlaforge.model import (
    AttentionWeights,
    KvCache,
    ModelConfig,
    ModelError,
    TokenSequence,
    forward_mha_gqa,
    forward_mla,
    named_parameters,
    with_parameters,
)
from mlaforge.rope import apply_rope
from mlaforge.synthetic import random_layers

from conftest import random_sequence


def naive_forward(cfg, layers, seq):
    """Loop-nest attention oracle, one token and one head at a time."""
    spec = cfg.rope_spec()
    n, d = seq.n_tokens, cfg.d_head
    h = [seq.embeddings[:, i].copy() for i in range(n)]
    for w in layers:
        new = []
        for i in range(n):
            merged = np.zeros(cfg.n_heads * d)
            for head in range(cfg.n_heads):
                g = head // cfg.group_size
                q = apply_rope(spec, w.w_q[head * d : (head + 1) * d] @ h[i], seq.positions[i])
                scores = []
                for j in range(i + 1):
                    k = apply_rope(spec, w.w_k[g * d : (g + 1) * d] @ h[j], seq.positions[j])
                    scores.append(float(q @ k) / np.sqrt(d))
                m = max(scores)
                e = [np.exp(s - m) for s in scores]
                z = sum(e)
                out = np.zeros(d)
                for j in range(i + 1):
                    out += (e[j] / z) * (w.w_v[g * d : (g + 1) * d] @ h[j])
                merged[head * d : (head + 1) * d] = out
            new.append(h[i] + w.w_o @ merged)
        h = new
    return np.stack(h, axis=1)


def test_config_validation():
    with pytest.raises(ModelError):
        ModelConfig(1, 3, 2, 8, 8)
    with pytest.raises(ModelError):
        ModelConfig(1, 2, 2, 8, 7)
    with pytest.raises(ModelError):
        ModelConfig(1, 2, 2, 8, 8, d_rope=3)
    with pytest.raises(ModelError):
        ModelConfig(1, 2, 2, 8, 8, d_rope=4, d_latent=13)
    with pytest.raises(ModelError):
        ModelConfig(1, 2, 2, 8, 8, rope_kind="mrope")
    cfg = ModelConfig(1, 4, 2, 8, 8, d_rope=4)
    assert cfg.d_latent == 12 and cfg.r == 2 and cfg.group_size == 2
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_text_tokens_need_equal_triples():
    with pytest.raises(ModelError):
        TokenSequence(np.zeros((2, 1)), [1], [[0, 1, 0]])
    TokenSequence(np.zeros((2, 1)), ["visual"], [[0, 1, 0]])
    with pytest.raises(ModelError):
        TokenSequence(np.zeros((2, 1)), ["audio"], [[0, 0, 0]])


def test_matches_naive_oracle(gqa_toy):
    cfg, layers = gqa_toy
    seq = random_sequence(np.random.default_rng(0), cfg.d_model, 4, n_visual=2)
    out, attn = forward_mha_gqa(cfg, layers, seq)
    assert np.max(np.abs(out - naive_forward(cfg, layers, seq))) <= 1e-10


def test_mrope_matches_naive_oracle():
    cfg = ModelConfig(2, 4, 2, 16, 16, rope_kind="mrope")
    layers = random_layers(cfg, np.random.default_rng(1), 2.0)
    pos = np.array([[0, 0, 0], [1, 0, 0], [1, 0, 1], [1, 1, 0], [3, 3, 3]])
    seq = TokenSequence(np.random.default_rng(2).normal(size=(16, 5)), [1, 0, 0, 0, 1], pos)
    assert np.max(np.abs(forward_mha_gqa(cfg, layers, seq)[0] - naive_forward(cfg, layers, seq))) <= 1e-10


def test_gqa_equals_mha_with_duplicated_kv_heads(gqa_toy):
    cfg, layers = gqa_toy
    d = cfg.d_head
    mha_cfg = cfg.replace(n_kv_heads=cfg.n_heads)
    dup = lambda m: np.concatenate([m[(h // cfg.group_size) * d : (h // cfg.group_size + 1) * d] for h in range(cfg.n_heads)])
    mha = [AttentionWeights(w.w_q, dup(w.w_k), dup(w.w_v), w.w_o) for w in layers]
    seq = random_sequence(np.random.default_rng(3), cfg.d_model, 6)
    a, attn_a = forward_mha_gqa(cfg, layers, seq)
    b, attn_b = forward_mha_gqa(mha_cfg, mha, seq)
    assert np.array_equal(a, b)


def test_single_token_attention_is_one(gqa_toy):
    cfg, layers = gqa_toy
    _, attn = forward_mha_gqa(cfg, layers, random_sequence(np.random.default_rng(4), cfg.d_model, 1))
    for p in attn:
        assert np.array_equal(p, np.ones((cfg.n_heads, 1, 1)))


def test_attention_rows_are_causal_distributions(gqa_toy):
    cfg, layers = gqa_toy
    _, attn = forward_mha_gqa(cfg, layers, random_sequence(np.random.default_rng(5), cfg.d_model, 7))
    for p in attn:
        assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(p[:, np.triu_indices(7, 1)[0], np.triu_indices(7, 1)[1]] == 0)


def test_shape_mismatch_raises(gqa_toy):
    cfg, layers = gqa_toy
    with pytest.raises(ModelError):
        forward_mha_gqa(cfg, layers, random_sequence(np.random.default_rng(0), cfg.d_model + 1, 3))


def test_named_parameters_round_trip(gqa_toy):
    cfg, layers = gqa_toy
    params = named_parameters(layers)
    assert list(params)[:4] == ["layer.0.w_q", "layer.0.w_k", "layer.0.w_v", "layer.0.w_o"]
    new = with_parameters(layers, {"layer.1.w_k": np.zeros_like(layers[1].w_k)})
    assert np.all(new[1].w_k == 0) and np.array_equal(new[0].w_k, layers[0].w_k)
    assert not np.all(layers[1].w_k == 0)


# MLA


@pytest.fixture
def mla_toy(gqa_toy):
    cfg, layers = gqa_toy
    rng = np.random.default_rng(11)
    calib = [random_sequence(rng, cfg.d_model, 12, n_visual=5) for _ in range(4)]
    target = cfg.replace(d_rope=4, d_latent=6)
    mla, _ = convert(target, layers, calib, strategy="two_norm", check_equivalence=False)
    return target, mla


def test_mla_empty_cache_one_token(mla_toy):
    cfg, mla = mla_toy
    _, cache = forward_mla(cfg, mla, random_sequence(np.random.default_rng(0), cfg.d_model, 1))
    assert cache.n_tokens == 1
    assert all(a.shape[0] == 1 for a in cache.latents + cache.rope_keys)


def test_mla_cache_size_formula(mla_toy):
    cfg, mla = mla_toy
    T = 9
    _, cache = forward_mla(cfg, mla, random_sequence(np.random.default_rng(1), cfg.d_model, T, n_visual=4))
    assert cache.n_elements() == T * cfg.n_layers * cfg.n_kv_heads * (cfg.d_latent + cfg.d_rope)
    assert cache.storage_bits == 16


def test_incremental_decode_matches_full(mla_toy):
    cfg, mla = mla_toy
    seq = random_sequence(np.random.default_rng(2), cfg.d_model, 4, n_visual=2)
    full, full_cache = forward_mla(cfg, mla, seq)
    first, cache = forward_mla(cfg, mla, seq.slice(0, 3))
    snapshot = [a.copy() for a in cache.latents]
    last, cache2 = forward_mla(cfg, mla, seq.slice(3, 4), cache)
    assert np.max(np.abs(np.concatenate([first, last], axis=1) - full)) <= 1e-9
    # earlier entries are never mutated, and the old cache value is untouched
    for old, a, b in zip(snapshot, cache.latents, cache2.latents):
        assert np.array_equal(old, a) and np.array_equal(old, b[:3])
    assert np.array_equal(cache2.modality, full_cache.modality)


def test_mla_latents_use_token_modality(mla_toy):
    cfg, mla = mla_toy
    seq = random_sequence(np.random.default_rng(3), cfg.d_model, 2, n_visual=1)
    _, cache = forward_mla(cfg, mla, seq)
    dl = cfg.d_latent
    x = seq.embeddings
    for g in range(cfg.n_kv_heads):
        assert np.allclose(cache.latents[0][0, g * dl : (g + 1) * dl], mla[0].w_down["visual"][g] @ x[:, 0])
        assert np.allclose(cache.latents[0][1, g * dl : (g + 1) * dl], mla[0].w_down["text"][g] @ x[:, 1])


def test_mla_deterministic(mla_toy):
    cfg, mla = mla_toy
    seq = random_sequence(np.random.default_rng(4), cfg.d_model, 5, n_visual=2)
    a, _ = forward_mla(cfg, mla, seq)
    b, _ = forward_mla(cfg, mla, seq)
    assert np.array_equal(a, b)


def test_mla_cache_mismatch(mla_toy):
    cfg, mla = mla_toy
    bad = KvCache.empty(cfg, d_latent=cfg.d_latent - 1)
    with pytest.raises(ModelError):
        forward_mla(cfg, mla, random_sequence(np.random.default_rng(5), cfg.d_model, 2), bad)
    with pytest.raises(ModelError):
        forward_mla(cfg.replace(n_layers=1), mla, random_sequence(np.random.default_rng(5), cfg.d_model, 2))
