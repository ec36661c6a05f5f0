"""Time the numpy and compiled kernel backends, alone and inside a training step.

    python benchmarks/bench_kernels.py [--repeat 50]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from aimkp import kernels
from aimkp.masking import compose_mask_plan, unmasked_plan
from aimkp.model import ModelConfig, Sample, batch_grad, encode_batch, init_model


def kernel_cases(rng):
    B, H, T, d, D = 24, 4, 64, 8, 32
    q, k, v = (rng.normal(size=(B, H, T, d)) for _ in range(3))
    allowed = np.tril(np.ones((T, T), dtype=np.uint8))[None].repeat(B, 0)
    x = rng.normal(size=(B * T, D))
    g, b = np.ones(D), np.zeros(D)
    u = rng.normal(size=(B * T, 4 * D))
    dout = rng.normal(size=(B, H, T, d))

    def cases(K):
        _, probs = K.attention_forward(q, k, v, allowed)
        _, xhat, rstd = K.layernorm_forward(x, g, b)
        return {
            "attention fwd": lambda: K.attention_forward(q, k, v, allowed),
            "attention bwd": lambda: K.attention_backward(dout, q, k, v, probs),
            "layernorm fwd": lambda: K.layernorm_forward(x, g, b),
            "layernorm bwd": lambda: K.layernorm_backward(x, xhat, rstd, g),
            "gelu fwd": lambda: K.gelu_forward(u),
            "gelu bwd": lambda: K.gelu_backward(u, u),
        }

    return cases


def step_case(rng):
    cfg = ModelConfig(
        visual_vocab=28, text_vocab=46, output_vocab=55, prompt=(1, 2), embed_dim=32, num_heads=4
    )
    params = init_model(cfg)
    params.flat += rng.normal(0, 0.05, params.flat.shape)
    items = []
    for i in range(8):
        s = Sample(
            rng.integers(0, 28, (6, 6)), rng.integers(0, 46, 12), list(rng.integers(2, 55, 4)) + [1]
        )
        items += [
            (s, unmasked_plan((6, 6), 12)),
            (s, compose_mask_plan((6, 6), 12, gamma_visual=2, target="visual")),
            (s, compose_mask_plan((6, 6), 12, gamma_text=4, target="text")),
        ]
    batch = encode_batch(cfg, items)
    return lambda: batch_grad(params, batch, per_example=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=30)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    step = step_case(rng)
    names = list(kernels.available_backends())
    per_backend = {}
    for name in names:
        with kernels.using(name) as K:
            per_backend[name] = cases(K)
    # backends alternate inside every repetition so drift hits both equally
    rows: dict[str, dict[str, list[float]]] = {}
    labels = list(per_backend[names[0]]) + ["window step (8 samples x 3 variants)"]
    for _ in range(args.repeat):
        for name in names:
            with kernels.using(name):
                for label in labels:
                    fn = step if label.startswith("window") else per_backend[name][label]
                    t = time.perf_counter()
                    fn()
                    rows.setdefault(label, {}).setdefault(name, []).append(time.perf_counter() - t)
    rows = {lab: {n: 1e3 * min(ts) for n, ts in d.items()} for lab, d in rows.items()}
    header = f"{'case':<40}" + "".join(f"{n + ' ms':>14}" for n in names)
    if len(names) == 2:
        header += f"{'speedup':>10}"
    print(header)
    backends = kernels.available_backends()
    for label, t in rows.items():
        line = f"{label:<40}" + "".join(f"{t[n]:14.3f}" for n in names)
        if len(names) == 2:
            fn = label.split()[0] + "_" + {"fwd": "forward", "bwd": "backward"}.get(label.split()[-1], "")
            if getattr(backends["numpy"], fn, 0) is getattr(backends["compiled"], fn, 1):
                line += f"{'shared':>10}"  # same function object in both backends
            else:
                line += f"{t['numpy'] / t['compiled']:9.2f}x"
        print(line)
    if "compiled" not in names:
        print("(compiled extension not built; numpy only)")


if __name__ == "__main__":
    main()
