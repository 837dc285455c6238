import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moeqlab.errors import ConfigError, InputError
from moeqlab.model import (
    ExpertFFN,
    ModelConfig,
    expert_usage,
    forge_model,
    forward_batch,
    gate,
    model_forward,
    moe_forward,
    perplexity,
    perplexity_from_logprobs,
    select_topk,
    stats_from_counts,
)
from tests.oracles import moe_oracle, nll_oracle

SKEW_CFG = ModelConfig(vocab_size=256, d_model=16, n_layers=2, d_ff=32,
                       n_shared=1, n_routed=8, top_k=2, max_seq_len=64)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(32, 8, 1, 16, 0, 4, 5, 8)  # k > n
    with pytest.raises(ConfigError):
        ModelConfig(1, 8, 1, 16, 0, 4, 2, 8)
    with pytest.raises(ConfigError):
        ModelConfig(32, 8, 1, 16, -1, 4, 2, 8)


def test_forge_deterministic(small_config):
    a = forge_model(small_config, 3, 1.5)
    b = forge_model(small_config, 3, 1.5)
    for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
        assert na == nb
        assert ta.tobytes() == tb.tobytes()
    c = forge_model(small_config, 4, 1.5)
    assert a.head.tobytes() != c.head.tobytes()


def _usage_on_random_tokens(weights, n_tokens=10_240, seed=0):
    toks = np.random.default_rng(seed).integers(0, weights.config.vocab_size, size=(n_tokens // 32, 32))
    _, traces = forward_batch(weights, toks)
    counts = np.stack([np.bincount(lt.topk.ravel(), minlength=weights.config.n_routed) for lt in traces])
    return stats_from_counts(counts)


def test_skew_increases_imbalance():
    flat = _usage_on_random_tokens(forge_model(SKEW_CFG, 0, 0.0))
    skewed = _usage_on_random_tokens(forge_model(SKEW_CFG, 0, 2.0))
    assert flat.sigma < skewed.sigma


def test_strong_skew_long_tail():
    stats = _usage_on_random_tokens(forge_model(SKEW_CFG, 0, 5.0))
    assert np.max(stats.frequencies.max(axis=1) * SKEW_CFG.n_routed) > 2.0


def test_gate_zero_router_uniform(small_model):
    w = forge_model(small_model.config, 0)
    w.layers[0].router[:] = 0.0
    p = gate(w, 0, np.ones(w.config.d_model))
    np.testing.assert_allclose(p, np.full(w.config.n_experts, 1 / w.config.n_experts), rtol=1e-15)


def test_gate_softmax_value():
    cfg = ModelConfig(8, 4, 1, 4, 1, 3, 1, 4)
    w = forge_model(cfg, 0)
    w.layers[0].router[:] = 0.0
    w.layers[0].router[0, 0] = 2.0
    p = gate(w, 0, np.array([1.0, 0.0, 0.0, 0.0]))
    e2 = math.exp(2.0)
    np.testing.assert_allclose(p, [e2 / (e2 + 3), 1 / (e2 + 3), 1 / (e2 + 3), 1 / (e2 + 3)], rtol=1e-12)
    assert p[0] == pytest.approx(0.7112346, abs=1e-7)


def test_gate_shift_invariance(small_model, rng):
    x = rng.standard_normal(small_model.config.d_model)
    logits = x @ small_model.layers[0].router
    shifted = logits + 3.7
    p = np.exp(shifted - shifted.max()) / np.exp(shifted - shifted.max()).sum()
    np.testing.assert_allclose(gate(small_model, 0, x), p, rtol=1e-12)
    m = small_model.config.n_shared
    assert np.array_equal(select_topk(p[m:], 2), select_topk(gate(small_model, 0, x)[m:], 2))


def test_topk_tie_break_lowest_index():
    assert select_topk(np.array([0.2, 0.3, 0.3, 0.2]), 2).tolist() == [1, 2]
    assert select_topk(np.array([0.25] * 4), 3).tolist() == [0, 1, 2]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gate_probabilities_normalised(seed):
    r = np.random.default_rng(seed)
    w = forge_model(ModelConfig(16, 8, 1, 8, 2, 5, 2, 8), seed % 1000, r.uniform(0, 4))
    p = gate(w, 0, r.standard_normal(8) * 3)
    assert np.all(p > 0)
    assert abs(p.sum() - 1) <= 1e-6


def test_moe_identical_experts_collapse(rng):
    cfg = ModelConfig(8, 6, 1, 10, 0, 4, 4, 4)
    w = forge_model(cfg, 1)
    e = w.layers[0].routed[0]
    w.layers[0].routed = [ExpertFFN(e.w_up, e.w_gate, e.w_down) for _ in range(4)]
    w.layers[0]._stack = None
    x = rng.standard_normal(6)
    y, step = moe_forward(w, 0, x)
    np.testing.assert_allclose(y, e(x) * step.probs.sum(), atol=1e-12)


def test_moe_one_hot_gate(rng):
    cfg = ModelConfig(8, 6, 1, 10, 0, 4, 1, 4)
    w = forge_model(cfg, 2)
    x = rng.standard_normal(6)
    w.layers[0].router[:] = 0.0
    w.layers[0].router[:, 2] = 1e4 * x / (x @ x)
    y, step = moe_forward(w, 0, x)
    assert step.topk.tolist() == [2]
    np.testing.assert_allclose(y, w.layers[0].routed[2](x), atol=1e-9)


def test_moe_matches_oracle(rng):
    cfg = ModelConfig(8, 6, 1, 10, 1, 4, 2, 4)
    for seed in range(10):
        w = forge_model(cfg, seed, rng.uniform(0, 3))
        x = rng.standard_normal(6) * 2
        y, step = moe_forward(w, 0, x)
        y_ref, chosen, g = moe_oracle(w, 0, x)
        assert np.max(np.abs(y - y_ref)) <= 1e-9
        assert sorted(step.topk.tolist()) == chosen
        np.testing.assert_allclose(step.probs, g, rtol=1e-12)


def test_moe_rejects_bad_width(small_model):
    with pytest.raises(InputError):
        moe_forward(small_model, 0, np.ones(3))


def test_model_forward_causal(small_model, rng):
    toks = rng.integers(0, small_model.config.vocab_size, size=12)
    lp, _ = model_forward(small_model, toks)
    other = toks.copy()
    other[7:] = rng.permutation(other[7:])
    other[7:] = (other[7:] + 1) % small_model.config.vocab_size
    lp2, _ = model_forward(small_model, other)
    np.testing.assert_array_equal(lp[:7], lp2[:7])


def test_model_forward_normalised(small_model, rng):
    toks = rng.integers(0, small_model.config.vocab_size, size=20)
    lp, trace = model_forward(small_model, toks)
    assert lp.shape == (20, small_model.config.vocab_size)
    assert np.all(np.abs(np.exp(lp).sum(axis=1) - 1) <= 1e-6)
    assert trace.n_tokens == 20
    for lt in trace.layers:
        assert np.all(np.abs(lt.probs.sum(axis=1) - 1) <= 1e-6)


def test_model_forward_single_token(small_model):
    lp, trace = model_forward(small_model, [3])
    assert lp.shape == (1, small_model.config.vocab_size)


def test_model_forward_rejects_oov(small_model):
    with pytest.raises(InputError):
        model_forward(small_model, [1, small_model.config.vocab_size])
    with pytest.raises(InputError):
        model_forward(small_model, list(range(small_model.config.max_seq_len + 1)))


def test_perplexity_uniform_model():
    cfg = ModelConfig(16, 8, 1, 8, 0, 2, 1, 10)
    w = forge_model(cfg, 0)
    w.head[:] = 0.0
    assert perplexity(w, [1, 2, 3, 4, 5]) == pytest.approx(16.0, abs=1e-6)


def test_perplexity_certain_predictions():
    lp = np.full((4, 5), -np.inf)
    toks = [0, 3, 1, 4]
    for i in range(3):
        lp[i, toks[i + 1]] = 0.0
    assert perplexity_from_logprobs(lp, toks) == 1.0


def test_perplexity_matches_oracle(small_model, rng):
    for _ in range(10):
        toks = rng.integers(0, small_model.config.vocab_size, size=rng.integers(2, 20))
        lp, _ = model_forward(small_model, toks)
        ref = math.exp(nll_oracle(lp, toks))
        ppl = perplexity(small_model, toks)
        assert abs(ppl - ref) <= 1e-9 * ref
        assert ppl >= 1.0


def test_perplexity_needs_two_tokens(small_model):
    with pytest.raises(InputError):
        perplexity(small_model, [1])


def test_usage_examples():
    assert stats_from_counts([[1, 1, 1, 1]]).sigma == 0.0
    assert stats_from_counts([[4, 0, 0, 0]]).sigma == pytest.approx(math.sqrt((0.75**2 + 3 * 0.25**2) / 3))
    assert stats_from_counts([[4, 0, 0, 0]]).sigma == pytest.approx(0.5, abs=1e-15)


def test_usage_layer_mean():
    # layers with sigma 0.1 and 0.3 average to 0.2
    def counts_for(sig):
        # two experts: frequencies (0.5 + a, 0.5 - a) have sample std a * sqrt(2)
        a = sig / math.sqrt(2)
        return [0.5 + a, 0.5 - a]
    stats = stats_from_counts([counts_for(0.1), counts_for(0.3)])
    np.testing.assert_allclose(stats.sigma_per_layer, [0.1, 0.3], rtol=1e-12)
    assert stats.sigma == pytest.approx(0.2, rel=1e-12)


def test_expert_usage_from_traces(small_model, rng):
    traces = [model_forward(small_model, rng.integers(0, 32, size=10))[1] for _ in range(3)]
    stats = expert_usage(traces, small_model.config.n_routed)
    assert np.all(np.abs(stats.frequencies.sum(axis=1) - 1) <= 1e-9)
    assert np.all(stats.sigma_per_layer >= 0)
    with pytest.raises(InputError):
        expert_usage([], small_model.config.n_routed)
