import numpy as np
import pytest

from aimkp import kernels
from aimkp.kernels import _numpy
from aimkp.masking import compose_mask_plan
from aimkp.model import backward

from conftest import random_sample, tiny_config, trained_like

compiled = kernels.available_backends().get("compiled")
needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


def _attn_inputs(rng, B=3, H=2, T=7, d=4):
    q, k, v = (rng.normal(size=(B, H, T, d)) for _ in range(3))
    allowed = np.tril(np.ones((T, T), dtype=np.uint8))[None].repeat(B, 0)
    allowed[1, :, 2] = 0
    allowed[1, np.arange(T), np.arange(T)] = 1
    return q, k, v, allowed


def test_numpy_attention_rows_sum_to_one():
    rng = np.random.default_rng(0)
    q, k, v, allowed = _attn_inputs(rng)
    _, probs = _numpy.attention_forward(q, k, v, allowed)
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-14)
    assert np.all(probs[allowed[:, None].repeat(2, 1) == 0] == 0)


@needs_compiled
def test_attention_backends_agree():
    rng = np.random.default_rng(1)
    q, k, v, allowed = _attn_inputs(rng)
    out_n, p_n = _numpy.attention_forward(q, k, v, allowed)
    out_c, p_c = compiled.attention_forward(q, k, v, allowed)
    np.testing.assert_allclose(out_c, out_n, atol=1e-13)
    np.testing.assert_allclose(p_c, p_n, atol=1e-13)
    dout = rng.normal(size=out_n.shape)
    for a, b in zip(
        compiled.attention_backward(dout, q, k, v, p_n),
        _numpy.attention_backward(dout, q, k, v, p_n),
    ):
        np.testing.assert_allclose(a, b, atol=1e-12)


@needs_compiled
def test_layernorm_backends_agree():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(45, 8))
    g, b = rng.normal(size=8), rng.normal(size=8)
    yn, xn, rn = _numpy.layernorm_forward(x, g, b)
    yc, xc, rc = compiled.layernorm_forward(x, g, b)
    np.testing.assert_allclose(yc, yn, atol=1e-13)
    dy = rng.normal(size=x.shape)
    np.testing.assert_allclose(
        compiled.layernorm_backward(dy, xn, rn, g), _numpy.layernorm_backward(dy, xn, rn, g), atol=1e-12
    )


@needs_compiled
def test_gelu_backends_agree():
    u = np.linspace(-40, 40, 2001).reshape(3, 667)
    dy = np.cos(u)
    np.testing.assert_allclose(compiled.gelu_forward(u), _numpy.gelu_forward(u), atol=1e-13)
    np.testing.assert_allclose(compiled.gelu_backward(dy, u), _numpy.gelu_backward(dy, u), atol=1e-12)


def test_gelu_derivative_numeric():
    u = np.linspace(-6, 6, 97)
    h = 1e-6
    fd = (_numpy.gelu_forward(u + h) - _numpy.gelu_forward(u - h)) / (2 * h)
    np.testing.assert_allclose(_numpy.gelu_backward(np.ones_like(u), u), fd, atol=1e-8)


@needs_compiled
def test_model_gradient_is_backend_independent():
    cfg = tiny_config()
    rng = np.random.default_rng(3)
    params = trained_like(cfg)
    s = random_sample(cfg, rng)
    plan = compose_mask_plan(cfg.grid_shape, cfg.text_len, 2, 2, target="text")
    with kernels.using("numpy"):
        gn = backward(params, s, plan).values
    with kernels.using("compiled"):
        gc = backward(params, s, plan).values
    np.testing.assert_allclose(gc, gn, rtol=1e-10, atol=1e-13)


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")


def test_using_restores_previous():
    before = kernels.BACKEND_NAME
    with kernels.using("numpy"):
        assert kernels.backend is _numpy
    assert kernels.BACKEND_NAME == before
