from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_ratio: float = 0.03) -> float:
    """Linear warmup then cosine decay to zero; ``step`` counts from 0."""
    warmup = max(1, int(math.ceil(warmup_ratio * total_steps))) if warmup_ratio > 0 else 0
    if step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class Adam:
    size: int
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.m = np.zeros(self.size)
        self.v = np.zeros(self.size)

    def step(self, flat: np.ndarray, grad: np.ndarray, lr: float | None = None) -> None:
        """In-place update of ``flat``."""
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        self.m *= b1
        self.m += (1 - b1) * grad
        self.v *= b2
        self.v += (1 - b2) * grad * grad
        mhat = self.m / (1 - b1**self.t)
        vhat = self.v / (1 - b2**self.t)
        if self.weight_decay:
            flat -= lr * self.weight_decay * flat
        flat -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_digest(self) -> str:
        import hashlib

        h = hashlib.sha256(self.m.tobytes())
        h.update(self.v.tobytes())
        h.update(str(self.t).encode())
        return h.hexdigest()[:16]
