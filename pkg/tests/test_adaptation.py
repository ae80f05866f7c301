"""Adapter/hypernetwork algebra, strategy configs, and exact parameter counts."""

import numpy as np
import pytest

import hyperadapt.autodiff as ad
from hyperadapt.adaptation import (
    AdaptedModel,
    AdapterDims,
    AdapterWeights,
    HyperNetwork,
    StaticAdapter,
    StrategyConfig,
    adapter_forward,
    adapter_param_count,
    count_trainable_params,
    flattened_weights,
    hyper_param_count,
)
from hyperadapt.autodiff import Tensor
from hyperadapt.errors import ConfigError, InputError, ShapeError
from hyperadapt.layers import RunCtx, rng_for
from hyperadapt.model import ModelConfig, TTSModel

PUBLISHED = AdapterDims()  # d_h=256, d_r=32, d_1=256, d_2=64, d_l=64, d_s=8

SMALL = AdapterDims(d_h=32, d_r=4, d_1=24, d_2=8, d_l=6, d_s=3)


def small_model(seed=7):
    cfg = ModelConfig(
        vocab_size=12, n_mels=16, d_h=32, heads=2, enc_layers=2, dec_layers=2,
        d_spk=24, d_attn=16, postnet_channels=24, postnet_layers=3,
    )
    return TTSModel(cfg, seed=seed)


# -----------------------------------------------------------------------------
# adapter algebra
# -----------------------------------------------------------------------------


def test_adapter_forward_matches_hand_computation():
    # d_h=4, d_r=2, every number chosen to keep the arithmetic exact
    w_down = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, -1.0], [0.0, 0.0]], dtype=np.float32)
    b_down = np.array([0.5, -1.0], dtype=np.float32)
    w_up = np.array([[1.0, 0.0, 2.0, 0.0], [0.0, 1.0, 0.0, -1.0]], dtype=np.float32)
    b_up = np.array([0.25, 0.0, 0.0, 0.0], dtype=np.float32)
    weights = AdapterWeights(
        Tensor(w_down), Tensor(b_down), Tensor(w_up), Tensor(b_up)
    )
    h = np.array([[1.0, 2.0, 3.0, 4.0]], dtype=np.float32)
    # pre-activation: [1+3+0.5, 2-3-1] = [4.5, -2]; relu -> [4.5, 0]
    # delta: [4.5, 0, 9, 0] + b_up = [4.75, 0, 9, 0]
    expected = np.array([[5.75, 2.0, 12.0, 4.0]], dtype=np.float32)
    out = adapter_forward(Tensor(h), weights)
    np.testing.assert_array_equal(out.data, expected)


def test_static_adapter_is_identity_at_init():
    adapter = StaticAdapter(rng_for(0, "t"), d_h=16, d_r=4)
    h = Tensor(rng_for(1, "h").normal(size=(5, 16)).astype(np.float32))
    out = adapter(h)
    np.testing.assert_array_equal(out.data, h.data)


def test_adapter_forward_rejects_dim_mismatch():
    adapter = StaticAdapter(rng_for(0, "t"), d_h=16, d_r=4)
    with pytest.raises(ShapeError):
        adapter(Tensor(np.zeros((3, 8), dtype=np.float32)))


def test_static_adapter_gradients_flow_at_init():
    # zero up-projection must not block gradients into the up matrix itself
    adapter = StaticAdapter(rng_for(3, "t"), d_h=6, d_r=2)
    h = Tensor(rng_for(4, "h").normal(size=(3, 6)).astype(np.float32))
    loss = ad.sum_all(adapter(h))
    loss.backward()
    assert adapter.w_up.grad is not None
    assert np.abs(adapter.w_up.grad).max() > 0
    # w_down only matters through the (currently zero) up matrix
    assert np.abs(adapter.w_down.grad).max() == 0


# -----------------------------------------------------------------------------
# hypernetwork
# -----------------------------------------------------------------------------


def spk(dims, seed=0):
    v = rng_for(seed, "spk").normal(size=(1, dims.d_1)).astype(np.float32)
    return Tensor(v)


def test_hypernetwork_identity_at_init():
    hyper = HyperNetwork(rng_for(0, "h"), n_sites=3, dims=SMALL)
    w = hyper.generate(spk(SMALL), site=1)
    h = Tensor(rng_for(2, "x").normal(size=(4, SMALL.d_h)).astype(np.float32))
    out = adapter_forward(h, w)
    np.testing.assert_array_equal(out.data, h.data)
    assert np.abs(w.w_up.data).max() == 0
    assert np.abs(w.b_up.data).max() == 0


def test_hypernetwork_generate_deterministic():
    hyper = HyperNetwork(rng_for(0, "h"), n_sites=3, dims=SMALL)
    a = flattened_weights(hyper.generate(spk(SMALL), 0))
    b = flattened_weights(hyper.generate(spk(SMALL), 0))
    np.testing.assert_array_equal(a, b)


def test_hypernetwork_sites_differ():
    hyper = HyperNetwork(rng_for(0, "h"), n_sites=3, dims=SMALL)
    a = flattened_weights(hyper.generate(spk(SMALL), 0))
    b = flattened_weights(hyper.generate(spk(SMALL), 2))
    assert np.abs(a - b).max() > 0


def test_hypernetwork_speakers_differ_and_vary_continuously():
    hyper = HyperNetwork(rng_for(0, "h"), n_sites=2, dims=SMALL)
    v = spk(SMALL, seed=5)
    base = flattened_weights(hyper.generate(v, 0))
    other = flattened_weights(hyper.generate(spk(SMALL, seed=6), 0))
    assert np.abs(base - other).max() > 0
    # all-affine pipeline: output moves linearly with an input perturbation
    eps = 1e-3
    bumped_data = v.data.copy()
    bumped_data[0, 0] += eps
    bumped = flattened_weights(hyper.generate(Tensor(bumped_data), 0))
    drift = np.abs(bumped - base).max()
    assert 0 < drift < 1.0 * eps * 100


def test_hypernetwork_site_index_validated():
    hyper = HyperNetwork(rng_for(0, "h"), n_sites=2, dims=SMALL)
    with pytest.raises(InputError):
        hyper.generate(spk(SMALL), 2)
    with pytest.raises(ShapeError):
        hyper.generate(Tensor(np.zeros((1, SMALL.d_1 + 1), dtype=np.float32)), 0)


def test_hypernetwork_gradients_reach_all_parameters():
    hyper = HyperNetwork(rng_for(1, "h"), n_sites=2, dims=SMALL)
    # nudge the up sampler off zero so the down path participates too
    hyper.sampler_up.w.data += 0.01
    h = Tensor(rng_for(2, "x").normal(size=(3, SMALL.d_h)).astype(np.float32))
    out = adapter_forward(h, hyper.generate(spk(SMALL), 1))
    ad.sum_all(out).backward()
    for name, p in hyper.named_parameters():
        assert p.grad is not None, name
        assert np.abs(p.grad).max() > 0, name


def test_hypernetwork_generate_gradcheck():
    dims = AdapterDims(d_h=5, d_r=2, d_1=4, d_2=3, d_l=3, d_s=2)
    hyper = HyperNetwork(rng_for(9, "h"), n_sites=2, dims=dims)
    hyper.sampler_up.w.data = rng_for(10, "u").normal(
        size=hyper.sampler_up.w.shape).astype(np.float32) * 0.1
    h_data = rng_for(11, "x").normal(size=(3, 5))
    v_data = rng_for(12, "v").normal(size=(1, 4))

    params = [p for _, p in hyper.named_parameters()]
    for p in params:
        p.data = p.data.astype(np.float64)

    def fn(v, *ps):
        out = adapter_forward(Tensor(h_data), hyper.generate(v, 0))
        return ad.sum_all(out)

    report = ad.grad_check(fn, [Tensor(v_data, requires_grad=True), *params])
    assert report.passed, repr(report)


# -----------------------------------------------------------------------------
# strategy configs
# -----------------------------------------------------------------------------


def test_strategy_parse_and_label():
    assert StrategyConfig.parse("tts0").label() == "tts0"
    assert StrategyConfig.parse("ft").label() == "ft"
    assert StrategyConfig.parse("adapter_e").sites == ("e",)
    assert StrategyConfig.parse("hyper_evd").sites == ("e", "v", "d")
    # site order normalizes to encoder, variance, decoder
    assert StrategyConfig.parse("adapter_de").label() == "adapter_ed"


@pytest.mark.parametrize("label", ["warm", "adapter", "adapter_x", "adapter_ee", "tts0_e"])
def test_strategy_rejects_bad_labels(label):
    with pytest.raises(ConfigError):
        StrategyConfig.parse(label)


# -----------------------------------------------------------------------------
# parameter counts (reference dimensions)
# -----------------------------------------------------------------------------


def test_single_adapter_count():
    assert adapter_param_count(PUBLISHED) == 16672


@pytest.mark.parametrize("label,expected", [
    ("adapter_e", 66688),
    ("adapter_v", 33344),
    ("adapter_d", 100032),
    ("adapter_ed", 166720),
    ("adapter_evd", 200064),
    ("hyper_e", 151112),
    ("hyper_v", 150984),
    ("hyper_d", 151240),
    ("hyper_evd", 453336),
])
def test_strategy_counts_at_reference_dims(label, expected):
    cfg = StrategyConfig.parse(label, PUBLISHED)
    assert count_trainable_params(cfg) == expected


@pytest.mark.parametrize("d_s,expected_d,expected_e,expected_evd", [
    (2, 50434, 50306, 150918),
    (8, 151240, 151112, 453336),
    (32, 554464, 554336, 1663008),
    (128, 2167360, 2167232, 6501696),
])
def test_hyper_counts_scale_with_source_dim(d_s, expected_d, expected_e, expected_evd):
    dims = AdapterDims(d_s=d_s)
    assert count_trainable_params(StrategyConfig.parse("hyper_d", dims)) == expected_d
    assert count_trainable_params(StrategyConfig.parse("hyper_e", dims)) == expected_e
    assert count_trainable_params(StrategyConfig.parse("hyper_evd", dims)) == expected_evd


def test_counts_match_live_modules():
    adapter = StaticAdapter(rng_for(0, "a"), PUBLISHED.d_h, PUBLISHED.d_r)
    assert adapter.param_count() == adapter_param_count(PUBLISHED)
    for n_sites in (2, 4, 6):
        hyper = HyperNetwork(rng_for(0, "h"), n_sites, PUBLISHED)
        assert hyper.param_count() == hyper_param_count(PUBLISHED, n_sites)


def test_ft_count_requires_backbone_total():
    assert count_trainable_params(StrategyConfig.parse("tts0")) == 0
    assert count_trainable_params(StrategyConfig.parse("ft"), backbone_param_count=123) == 123
    with pytest.raises(ConfigError):
        count_trainable_params(StrategyConfig.parse("ft"))


# -----------------------------------------------------------------------------
# adapted model wiring
# -----------------------------------------------------------------------------


def test_adapted_model_rejects_dim_mismatch():
    model = small_model()
    with pytest.raises(ConfigError):
        AdaptedModel(model, StrategyConfig.parse("adapter_e", AdapterDims(d_h=64, d_1=24)))
    with pytest.raises(ConfigError):
        AdaptedModel(model, StrategyConfig.parse("adapter_e", AdapterDims(d_h=32, d_1=16)))


@pytest.mark.parametrize("label", ["tts0", "ft", "adapter_e", "adapter_evd", "hyper_v", "hyper_evd"])
def test_trainable_enumeration_matches_count(label):
    model = small_model()
    cfg = StrategyConfig.parse(label, SMALL)
    adapted = AdaptedModel(model, cfg, seed=3)
    expected = count_trainable_params(
        cfg, backbone_param_count=model.param_count(), site_counts=model.site_counts()
    )
    assert adapted.trainable_count() == expected
    names = [n for n, _ in adapted.named_trainable()]
    assert len(names) == len(set(names))
    if label == "tts0":
        assert names == []
    elif label == "ft":
        assert all(n.startswith("model.") for n in names)
    else:
        assert all(n.startswith("extras.") for n in names)


def test_freeze_flags_per_strategy():
    model = small_model()
    AdaptedModel(model, StrategyConfig.parse("hyper_e", SMALL))
    assert all(not p.requires_grad for p in model.parameters())
    AdaptedModel(model, StrategyConfig.parse("ft"))
    assert all(p.requires_grad for p in model.parameters())


def synth_args(model):
    phon = np.array([1, 4, 2, 7], dtype=np.int64)
    spk_vec = rng_for(0, "spk").normal(size=model.config.d_spk).astype(np.float32)
    return phon, spk_vec


@pytest.mark.parametrize("label", ["adapter_evd", "hyper_evd"])
def test_adapted_synthesis_identity_at_init(label):
    model = small_model()
    model.set_ranges((4.5, 6.0), (0.0, 1.0))
    phon, spk_vec = synth_args(model)
    ref, _ = model.synthesize(phon, spk_vec)
    adapted = AdaptedModel(model, StrategyConfig.parse(label, SMALL), seed=5)
    hooks = adapted.hooks_for(Tensor(spk_vec.reshape(1, -1)))
    assert set(hooks) == {"e", "v", "d"}
    assert [len(hooks[t]) for t in ("e", "v", "d")] == [2, 2, 2]
    out, _ = model.synthesize(phon, spk_vec, hooks=hooks)
    np.testing.assert_array_equal(out, ref)


def test_adapted_synthesis_diverges_once_trained_weights_move():
    model = small_model()
    model.set_ranges((4.5, 6.0), (0.0, 1.0))
    phon, spk_vec = synth_args(model)
    ref, _ = model.synthesize(phon, spk_vec)
    adapted = AdaptedModel(model, StrategyConfig.parse("hyper_evd", SMALL), seed=5)
    # non-uniform nudge: channel-uniform deltas would vanish in the post-norm
    for tag in ("e", "v", "d"):
        w = getattr(adapted.extras, f"hyper_{tag}").sampler_up.w
        w.data += rng_for(8, "nudge", tag).normal(size=w.shape).astype(np.float32) * 0.05
    hooks = adapted.hooks_for(Tensor(spk_vec.reshape(1, -1)))
    out, _ = model.synthesize(phon, spk_vec, hooks=hooks)
    # encoder adapters feed the duration head, so even the length may move
    if out.shape == ref.shape:
        assert np.abs(out - ref).max() > 1e-4
    else:
        assert out.shape[0] != ref.shape[0]


def test_tts0_and_ft_add_no_hooks():
    model = small_model()
    for label in ("tts0", "ft"):
        adapted = AdaptedModel(model, StrategyConfig.parse(label, SMALL))
        assert adapted.hooks_for(Tensor(np.zeros((1, 24), dtype=np.float32))) is None


def test_detached_bypasses_adapters():
    model = small_model()
    adapted = AdaptedModel(model, StrategyConfig.parse("adapter_e", SMALL))
    adapted.detached = True
    assert adapted.hooks_for(Tensor(np.zeros((1, 24), dtype=np.float32))) is None


def test_adapted_state_roundtrip():
    model = small_model()
    adapted = AdaptedModel(model, StrategyConfig.parse("hyper_ev", SMALL), seed=1)
    state = adapted.state_arrays()
    assert any(k.startswith("extras.hyper_e.") for k in state)

    fresh = AdaptedModel(small_model(seed=99), StrategyConfig.parse("hyper_ev", SMALL), seed=2)
    fresh.load_state_arrays(state)
    for (_, a), (_, b) in zip(
        sorted(adapted.named_trainable()), sorted(fresh.named_trainable())
    ):
        np.testing.assert_array_equal(a.data, b.data)
    got = fresh.model.state_arrays()
    for k, v in model.state_arrays().items():
        np.testing.assert_array_equal(got[k], v)
