"""Decoder-only transformer over [visual | text | prompt | target] with exact backprop.

Everything is batched over independent sequences that share one parameter
vector. Gradients come back either summed over the batch (weighted by
per-sequence coefficients) or per sequence, which is what gradient filtering
needs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import kernels
from ..masking import MaskPlan, unmasked_plan
from .params import EOS_ID, ModelConfig, ModelParams, Sample


class NumericError(FloatingPointError):
    """Non-finite loss or gradient."""


class ShapeError(ValueError):
    pass


@dataclass
class GradientVector:
    """Flat gradient aligned with the parameter layout."""

    values: np.ndarray

    @property
    def l2_norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass
class Batch:
    tok: np.ndarray  # (B, T) rows of the stacked token table
    pos: np.ndarray  # (B, T) rows of the stacked position table
    allowed: np.ndarray  # (B, T, T) uint8
    labels: np.ndarray  # (B, L)
    weights: np.ndarray  # (B, L) 1 on real target tokens
    n_tokens: np.ndarray  # (B,)

    @property
    def size(self) -> int:
        return self.tok.shape[0]


def _offsets(config: ModelConfig):
    tok_text = config.visual_vocab
    tok_target = tok_text + config.text_vocab
    pos_col = config.grid_height
    pos_text = pos_col + config.grid_width
    pos_target = pos_text + config.text_len + len(config.prompt)
    return tok_text, tok_target, pos_col, pos_text, pos_target


def key_visibility(config: ModelConfig, sample: Sample, plan: MaskPlan) -> np.ndarray:
    """Visibility of the prefix positions [visual | text | prompt] as keys."""
    if plan.visual_mask.shape != config.grid_shape or plan.text_mask.shape != (config.text_len,):
        raise ShapeError("mask plan does not match the model dimensions")
    vis = plan.visual_mask.flat() & bool(sample.visual_visible)
    txt = plan.text_mask.flat() & bool(sample.text_visible)
    return np.concatenate([vis, txt, np.ones(len(config.prompt), dtype=bool)])


def encode_batch(
    config: ModelConfig,
    items: Sequence[tuple[Sample, MaskPlan]],
    target_inputs: Sequence[np.ndarray] | None = None,
) -> Batch:
    """Lay out token/position indices, attention permissions and labels.

    With ``target_inputs`` the given prefixes of generated tokens are fed instead
    of teacher forcing (decoding); labels are then empty.
    """
    tok_text, tok_target, pos_col, pos_text, pos_target = _offsets(config)
    H, W = config.grid_shape
    n_prefix = config.prefix_len
    B = len(items)
    if B == 0:
        raise ShapeError("empty batch")
    if target_inputs is None:
        for sample, _ in items:
            sample.validate(config)
        lens = np.array([s.target.size for s, _ in items])
        n_in = lens - 1
        L = int(lens.max())
    else:
        n_in = np.array([len(t) for t in target_inputs])
        if n_in.size and n_in.max() > config.max_target_len:
            raise ShapeError("decode prefix longer than max_target_len")
        lens = n_in
        L = 1
    T = n_prefix + int(n_in.max())

    grid_rows = np.repeat(np.arange(H), W)
    grid_cols = np.tile(np.arange(W), H)
    pos_prefix = np.concatenate(
        [grid_rows, np.arange(config.text_len + len(config.prompt)) + pos_text]
    )
    tok = np.full((B, T), tok_target + EOS_ID, dtype=np.int64)
    pos = np.empty((B, T), dtype=np.int64)
    pos[:, :n_prefix] = pos_prefix
    pos[:, n_prefix:] = pos_target + np.arange(T - n_prefix)
    visible = np.ones((B, T), dtype=bool)
    labels = np.zeros((B, L), dtype=np.int64)
    weights = np.zeros((B, L))
    prompt = np.asarray(config.prompt, dtype=np.int64)
    for b, (sample, plan) in enumerate(items):
        tok[b, : H * W] = sample.grid.reshape(-1)
        tok[b, H * W : H * W + config.text_len] = sample.text + tok_text
        tok[b, H * W + config.text_len : n_prefix] = prompt + tok_text
        visible[b, :n_prefix] = key_visibility(config, sample, plan)
        if target_inputs is None:
            y = sample.target
            tok[b, n_prefix : n_prefix + y.size - 1] = y[:-1] + tok_target
            labels[b, : y.size] = y
            weights[b, : y.size] = 1.0
        else:
            t = np.asarray(target_inputs[b], dtype=np.int64)
            tok[b, n_prefix : n_prefix + t.size] = t + tok_target
            # decoding reads the last real position, so padding must be shorter
            if t.size != n_in.max():
                raise ShapeError("decode prefixes must share one length")
    causal = np.tri(T, dtype=bool)
    allowed = causal[None] & (visible[:, None, :] | np.eye(T, dtype=bool)[None])
    return Batch(tok, pos, allowed.astype(np.uint8), labels, weights, lens.astype(np.int64))


def _col_index(config: ModelConfig) -> np.ndarray:
    H, W = config.grid_shape
    return np.tile(np.arange(W), H) + config.grid_height


def _tables(params: ModelParams):
    cfg, lay = params.config, params.layout
    D = cfg.embed_dim
    tok = params.flat[lay.span("emb.visual", "emb.target")].reshape(-1, D)
    pos = params.flat[lay.span("pos.row", "pos.target")].reshape(-1, D)
    return tok, pos


def _forward(params: ModelParams, batch: Batch, last_only: bool = False):
    cfg = params.config
    K = kernels.backend
    v = params.views()
    D, Hh, dh = cfg.embed_dim, cfg.num_heads, cfg.head_dim
    B, T = batch.tok.shape
    n_vis = cfg.n_visual
    tok_table, pos_table = _tables(params)
    x = tok_table[batch.tok] + pos_table[batch.pos]
    x[:, :n_vis] += pos_table[_col_index(cfg)][None]
    cache = {"x0": x}
    layers = []
    for i in range(cfg.num_layers):
        p = f"block{i}."
        c = {}
        h1, c["xhat1"], c["rstd1"] = K.layernorm_forward(
            x.reshape(-1, D), v[p + "ln1.g"], v[p + "ln1.b"]
        )
        h1 = h1.reshape(B, T, D)
        qkv = h1 @ v[p + "attn.wqkv"] + v[p + "attn.bqkv"]
        qkv = qkv.reshape(B, T, 3, Hh, dh).transpose(2, 0, 3, 1, 4)
        q, k, vv = (np.ascontiguousarray(a) for a in qkv)
        a, probs = K.attention_forward(q, k, vv, batch.allowed)
        a2 = a.transpose(0, 2, 1, 3).reshape(B, T, D)
        x = x + (a2 @ v[p + "attn.wo"] + v[p + "attn.bo"])
        h2, c["xhat2"], c["rstd2"] = K.layernorm_forward(
            x.reshape(-1, D), v[p + "ln2.g"], v[p + "ln2.b"]
        )
        h2 = h2.reshape(B, T, D)
        u = h2 @ v[p + "mlp.w1"] + v[p + "mlp.b1"]
        g = K.gelu_forward(u)
        x = x + (g @ v[p + "mlp.w2"] + v[p + "mlp.b2"])
        c.update(h1=h1, q=q, k=k, v=vv, probs=probs, a2=a2, h2=h2, u=u, g=g)
        layers.append(c)
    start = T - 1 if last_only else cfg.prefix_len - 1
    xs = np.ascontiguousarray(x[:, start:])
    L = xs.shape[1]
    hf, xhatf, rstdf = K.layernorm_forward(xs.reshape(-1, D), v["lnf.g"], v["lnf.b"])
    hf = hf.reshape(B, L, D)
    logits = hf @ v["out.w"] + v["out.b"]
    cache.update(layers=layers, start=start, hf=hf, xhatf=xhatf, rstdf=rstdf)
    return logits, cache


def logits_last(params: ModelParams, batch: Batch) -> np.ndarray:
    logits, _ = _forward(params, batch, last_only=True)
    return logits[:, -1]


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _token_nll(logits, batch: Batch):
    logp = _log_softmax(logits)
    picked = np.take_along_axis(logp, batch.labels[..., None], axis=-1)[..., 0]
    return -picked * batch.weights, logp


def batch_nll(params: ModelParams, batch: Batch) -> np.ndarray:
    """Mean per-token negative log-likelihood of every sequence."""
    logits, _ = _forward(params, batch)
    tok_nll, _ = _token_nll(logits, batch)
    nll = tok_nll.sum(axis=1) / batch.n_tokens
    if not np.all(np.isfinite(nll)):
        raise NumericError(f"non-finite loss {nll}")
    return nll


def batch_grad(
    params: ModelParams,
    batch: Batch,
    coef: np.ndarray | None = None,
    per_example: bool = False,
):
    """Losses and gradients of ``sum_b coef[b] * nll_b``.

    Returns ``(nll, grad)``; ``grad`` has shape (P,) or, with ``per_example``,
    (B, P) holding the gradient of each coef[b] * nll_b separately.
    """
    cfg = params.config
    K = kernels.backend
    v = params.views()
    B, T = batch.tok.shape
    D, Hh, dh = cfg.embed_dim, cfg.num_heads, cfg.head_dim
    logits, cache = _forward(params, batch)
    tok_nll, logp = _token_nll(logits, batch)
    nll = tok_nll.sum(axis=1) / batch.n_tokens
    if not np.all(np.isfinite(nll)):
        raise NumericError(f"non-finite loss {nll}")
    coef = np.ones(B) if coef is None else np.asarray(coef, dtype=np.float64)

    G = np.zeros((B, params.layout.size) if per_example else params.layout.size)
    gv = params.layout.views(G)

    if per_example:
        def wsum(a, d):
            return np.matmul(a.transpose(0, 2, 1), d)

        def vsum(d):
            return d.sum(axis=1)
    else:
        def wsum(a, d):
            return a.reshape(-1, a.shape[-1]).T @ d.reshape(-1, d.shape[-1])

        def vsum(d):
            return d.sum(axis=(0, 1))

    dlogits = np.exp(logp)
    np.put_along_axis(
        dlogits, batch.labels[..., None],
        np.take_along_axis(dlogits, batch.labels[..., None], axis=-1) - 1.0, axis=-1,
    )
    dlogits *= (batch.weights * (coef / batch.n_tokens)[:, None])[..., None]

    hf = cache["hf"]
    gv["out.w"][...] = wsum(hf, dlogits)
    gv["out.b"][...] = vsum(dlogits)
    dhf = dlogits @ v["out.w"].T
    L = hf.shape[1]
    gv["lnf.g"][...] = vsum(dhf * cache["xhatf"].reshape(B, L, D))
    gv["lnf.b"][...] = vsum(dhf)
    dx = np.zeros((B, T, D))
    dx[:, cache["start"] :] = K.layernorm_backward(
        dhf.reshape(-1, D), cache["xhatf"], cache["rstdf"], v["lnf.g"]
    ).reshape(B, L, D)

    for i in reversed(range(cfg.num_layers)):
        p = f"block{i}."
        c = cache["layers"][i]
        # mlp branch
        gv[p + "mlp.w2"][...] = wsum(c["g"], dx)
        gv[p + "mlp.b2"][...] = vsum(dx)
        du = K.gelu_backward(dx @ v[p + "mlp.w2"].T, c["u"])
        gv[p + "mlp.w1"][...] = wsum(c["h2"], du)
        gv[p + "mlp.b1"][...] = vsum(du)
        dh2 = du @ v[p + "mlp.w1"].T
        xhat2 = c["xhat2"].reshape(B, T, D)
        gv[p + "ln2.g"][...] = vsum(dh2 * xhat2)
        gv[p + "ln2.b"][...] = vsum(dh2)
        dx = dx + K.layernorm_backward(
            dh2.reshape(-1, D), c["xhat2"], c["rstd2"], v[p + "ln2.g"]
        ).reshape(B, T, D)
        # attention branch
        gv[p + "attn.wo"][...] = wsum(c["a2"], dx)
        gv[p + "attn.bo"][...] = vsum(dx)
        da = (dx @ v[p + "attn.wo"].T).reshape(B, T, Hh, dh).transpose(0, 2, 1, 3)
        dq, dk, dvv = K.attention_backward(
            np.ascontiguousarray(da), c["q"], c["k"], c["v"], c["probs"]
        )
        dqkv = np.stack([dq, dk, dvv]).transpose(1, 3, 0, 2, 4).reshape(B, T, 3 * D)
        gv[p + "attn.wqkv"][...] = wsum(c["h1"], dqkv)
        gv[p + "attn.bqkv"][...] = vsum(dqkv)
        dh1 = dqkv @ v[p + "attn.wqkv"].T
        xhat1 = c["xhat1"].reshape(B, T, D)
        gv[p + "ln1.g"][...] = vsum(dh1 * xhat1)
        gv[p + "ln1.b"][...] = vsum(dh1)
        dx = dx + K.layernorm_backward(
            dh1.reshape(-1, D), c["xhat1"], c["rstd1"], v[p + "ln1.g"]
        ).reshape(B, T, D)

    lay = params.layout
    tok_span, pos_span = lay.span("emb.visual", "emb.target"), lay.span("pos.row", "pos.target")
    n_tok = (tok_span.stop - tok_span.start) // D
    n_pos = (pos_span.stop - pos_span.start) // D
    n_vis = cfg.n_visual
    col = _col_index(cfg)
    if per_example:
        bidx = np.arange(B)[:, None]
        gt = G[:, tok_span].reshape(B * n_tok, D)
        np.add.at(gt, (bidx * n_tok + batch.tok).ravel(), dx.reshape(-1, D))
        gp = G[:, pos_span].reshape(B * n_pos, D)
        np.add.at(gp, (bidx * n_pos + batch.pos).ravel(), dx.reshape(-1, D))
        np.add.at(gp, (bidx * n_pos + col[None]).ravel(), dx[:, :n_vis].reshape(-1, D))
        G[:, tok_span] = gt.reshape(B, -1)
        G[:, pos_span] = gp.reshape(B, -1)
    else:
        gt = G[tok_span].reshape(n_tok, D)
        np.add.at(gt, batch.tok.ravel(), dx.reshape(-1, D))
        gp = G[pos_span].reshape(n_pos, D)
        np.add.at(gp, batch.pos.ravel(), dx.reshape(-1, D))
        np.add.at(gp, np.broadcast_to(col, (B, n_vis)).ravel(), dx[:, :n_vis].reshape(-1, D))

    if not np.all(np.isfinite(G)):
        bad = [n for n, a in gv.items() if not np.all(np.isfinite(a))]
        raise NumericError(f"non-finite gradient in blocks {bad}")
    return nll, G


def forward_nll(params: ModelParams, sample: Sample, plan: MaskPlan | None = None) -> float:
    """Teacher-forced mean per-token NLL of the target."""
    cfg = params.config
    plan = plan or unmasked_plan(cfg.grid_shape, cfg.text_len)
    return float(batch_nll(params, encode_batch(cfg, [(sample, plan)]))[0])


def backward(params: ModelParams, sample: Sample, plan: MaskPlan | None = None) -> GradientVector:
    cfg = params.config
    plan = plan or unmasked_plan(cfg.grid_shape, cfg.text_len)
    _, grad = batch_grad(params, encode_batch(cfg, [(sample, plan)]))
    return GradientVector(grad)


def perplexity(params: ModelParams, sample: Sample, plan: MaskPlan | None = None) -> float:
    return float(np.exp(forward_nll(params, sample, plan)))


def finite_difference_gradient(
    params: ModelParams,
    sample: Sample,
    plan: MaskPlan | None = None,
    epsilon: float = 1e-5,
    coords: np.ndarray | None = None,
) -> GradientVector:
    """Central differences, on all coordinates or on ``coords`` (others left 0)."""
    if not 1e-6 <= epsilon <= 1e-2:
        raise ValueError("epsilon must lie in [1e-6, 1e-2]")
    cfg = params.config
    plan = plan or unmasked_plan(cfg.grid_shape, cfg.text_len)
    batch = encode_batch(cfg, [(sample, plan)])
    probe = params.copy()
    out = np.zeros(params.layout.size)
    idx = np.arange(params.layout.size) if coords is None else np.asarray(coords)
    for j in idx:
        orig = probe.flat[j]
        probe.flat[j] = orig + epsilon
        up = batch_nll(probe, batch)[0]
        probe.flat[j] = orig - epsilon
        down = batch_nll(probe, batch)[0]
        probe.flat[j] = orig
        out[j] = (up - down) / (2 * epsilon)
    return GradientVector(out)
