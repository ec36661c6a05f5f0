import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aimkp.masking import compose_mask_plan, unmasked_plan
from aimkp.model import (
    ConfigError,
    GradientVector,
    ModelConfig,
    backward,
    batch_grad,
    encode_batch,
    finite_difference_gradient,
    forward_nll,
    init_model,
    parameter_count,
    perplexity,
)
from aimkp.model.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from aimkp.model.decode import DecodeConfig, decode, split_phrases
from aimkp.model.network import batch_nll
from aimkp.model.optim import Adam, cosine_lr
from aimkp.model.params import EOS_ID, SEP_ID, Layout

from conftest import random_sample, tiny_config, trained_like


def test_param_budget_enforced():
    with pytest.raises(ConfigError):
        tiny_config(embed_dim=512, num_layers=8, param_budget=10_000)


def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        tiny_config(embed_dim=10, num_heads=3)


def test_layout_covers_flat_vector(cfg):
    lay = Layout.of(cfg)
    total = sum(int(np.prod(shape)) for _, _, shape in lay)
    assert total == lay.size == parameter_count(cfg)


def test_init_is_seeded(cfg):
    assert init_model(cfg).digest() == init_model(cfg).digest()
    assert init_model(cfg).digest() != init_model(tiny_config(seed=1)).digest()


def test_zero_head_gives_uniform_loss(cfg, rng):
    s = random_sample(cfg, rng)
    assert forward_nll(init_model(cfg), s) == pytest.approx(np.log(cfg.output_vocab), abs=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_central_differences(seed):
    cfg = tiny_config(seed=seed)
    rng = np.random.default_rng(seed)
    params = trained_like(cfg)
    s = random_sample(cfg, rng, length=5)
    plan = compose_mask_plan(cfg.grid_shape, cfg.text_len, 2, 2, target="visual")
    g = backward(params, s, plan).values
    fd = finite_difference_gradient(params, s, plan, epsilon=1e-5).values
    cos = g @ fd / (np.linalg.norm(g) * np.linalg.norm(fd))
    assert cos >= 0.999
    assert np.max(np.abs(g - fd)) <= 1e-4


def test_fd_epsilon_bounds(cfg, rng):
    with pytest.raises(ValueError):
        finite_difference_gradient(init_model(cfg), random_sample(cfg, rng), epsilon=1e-9)


def test_per_example_rows_match_single_backward(cfg, rng):
    params = trained_like(cfg)
    samples = [random_sample(cfg, rng, f"s{i}") for i in range(4)]
    plan = unmasked_plan(cfg.grid_shape, cfg.text_len)
    _, G = batch_grad(params, encode_batch(cfg, [(s, plan) for s in samples]), per_example=True)
    for s, row in zip(samples, G):
        np.testing.assert_allclose(row, backward(params, s).values, atol=1e-13)
    coef = np.array([1.0, 0.0, 2.0, 0.5])
    _, g = batch_grad(params, encode_batch(cfg, [(s, plan) for s in samples]), coef=coef)
    np.testing.assert_allclose(g, coef @ G, atol=1e-13)


def test_masked_tokens_do_not_influence_loss(cfg, rng):
    params = trained_like(cfg)
    s = random_sample(cfg, rng)
    plan = compose_mask_plan(cfg.grid_shape, cfg.text_len, 2, 2, target="visual")
    hidden = ~plan.visual_mask.bits.astype(bool)
    other = random_sample(cfg, rng)
    s2 = type(s)(np.where(hidden, other.grid, s.grid), s.text, s.target)
    assert forward_nll(params, s, plan) == forward_nll(params, s2, plan)
    assert forward_nll(params, s) != forward_nll(params, s2)


def test_invisible_modality_is_ignored(cfg, rng):
    params = trained_like(cfg)
    s = random_sample(cfg, rng)
    a = type(s)(s.grid, s.text, s.target, text_visible=False)
    b = type(s)(s.grid, (s.text + 1) % cfg.text_vocab, s.target, text_visible=False)
    assert forward_nll(params, a) == forward_nll(params, b)


def test_batch_padding_does_not_change_losses(cfg, rng):
    params = trained_like(cfg)
    samples = [random_sample(cfg, rng, length=n) for n in (2, 6, 4)]
    plan = unmasked_plan(cfg.grid_shape, cfg.text_len)
    together = batch_nll(params, encode_batch(cfg, [(s, plan) for s in samples]))
    alone = [forward_nll(params, s) for s in samples]
    np.testing.assert_allclose(together, alone, rtol=1e-13)


def test_perplexity_is_exp_loss(cfg, rng):
    params = trained_like(cfg)
    s = random_sample(cfg, rng)
    assert perplexity(params, s) == pytest.approx(np.exp(forward_nll(params, s)), rel=1e-15)


def test_sample_validation(cfg, rng):
    s = random_sample(cfg, rng)
    bad = type(s)(s.grid, s.text, np.full(cfg.max_target_len + 1, 2))
    with pytest.raises(ConfigError):
        forward_nll(init_model(cfg), bad)
    with pytest.raises(ConfigError):
        type(s)(s.grid[0], s.text, s.target)


def test_gradient_vector(cfg, rng):
    g = backward(trained_like(cfg), random_sample(cfg, rng))
    assert isinstance(g, GradientVector)
    assert len(g) == parameter_count(cfg)
    assert g.l2_norm == pytest.approx(np.linalg.norm(np.asarray(g)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_causality(seed):
    cfg = tiny_config()
    rng = np.random.default_rng(seed)
    params = trained_like(cfg)
    s = random_sample(cfg, rng, length=5)
    plan = unmasked_plan(cfg.grid_shape, cfg.text_len)
    from aimkp.model.network import _forward

    base, _ = _forward(params, encode_batch(cfg, [(s, plan)]))
    changed = s.target.copy()
    changed[3] = (changed[3] + 1) % cfg.output_vocab
    alt, _ = _forward(params, encode_batch(cfg, [(type(s)(s.grid, s.text, changed), plan)]))
    # logits predicting positions 0..3 only read target inputs 0..2
    np.testing.assert_array_equal(base[0, :4], alt[0, :4])


# -- optimizer ------------------------------------------------------------------


def test_cosine_schedule():
    lrs = [cosine_lr(t, 100, 1.0, 0.03) for t in range(100)]
    assert lrs[0] == pytest.approx(1 / 3)
    assert lrs[2] == 1.0
    assert max(lrs) == 1.0 and lrs[-1] < 0.01
    assert all(a >= b for a, b in zip(lrs[2:], lrs[3:]))


def test_adam_first_step_moves_by_lr():
    flat = np.zeros(3)
    Adam(3, lr=0.1).step(flat, np.array([1.0, -2.0, 0.0]))
    np.testing.assert_allclose(flat, [-0.1, 0.1, 0.0], atol=1e-7)


# -- decoding -------------------------------------------------------------------


def test_split_phrases():
    assert split_phrases([5, 6, SEP_ID, 7, EOS_ID, 9]) == [(5, 6), (7,)]
    assert split_phrases([SEP_ID, SEP_ID, 4]) == [(4,)]
    assert split_phrases([EOS_ID]) == []


def test_greedy_batched_matches_single(cfg, rng):
    params = trained_like(cfg)
    samples = [random_sample(cfg, rng) for _ in range(5)]
    batched = decode(params, samples)
    assert batched == [decode(params, s) for s in samples]


def test_greedy_recovers_memorized_target(cfg, rng):
    params = trained_like(cfg)
    s = random_sample(cfg, rng, length=4)
    s = type(s)(s.grid, s.text, np.array([3, SEP_ID, 5, EOS_ID]))
    opt = Adam(params.layout.size, lr=0.02)
    for _ in range(150):
        opt.step(params.flat, backward(params, s).values)
    assert decode(params, s) == [(3,), (5,)]
    beam = decode(params, s, DecodeConfig("beam-sample", beam_size=3, temperature=0.5, seed=4))
    assert beam == [(3,), (5,)]


def test_beam_sample_is_seeded(cfg, rng):
    params = trained_like(cfg)
    samples = [random_sample(cfg, rng) for _ in range(3)]
    dc = DecodeConfig("beam-sample", beam_size=3, temperature=1.0, seed=11)
    assert decode(params, samples, dc) == decode(params, samples, dc)


def test_decode_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig("nucleus")
    with pytest.raises(ValueError):
        DecodeConfig(temperature=0)


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, cfg):
    params = trained_like(cfg)
    save_checkpoint(params, tmp_path / "c.npz", {"epoch": 3})
    loaded, meta = load_checkpoint(tmp_path / "c.npz")
    assert meta == {"epoch": 3}
    assert loaded.config == cfg
    assert np.array_equal(loaded.flat, params.flat)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.npz"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_config_roundtrip(cfg):
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
