"""Model configuration, flat parameter layout, and training samples."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

SEP_ID = 0
EOS_ID = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    visual_vocab: int
    text_vocab: int
    output_vocab: int
    grid_height: int = 6
    grid_width: int = 6
    text_len: int = 12
    prompt: tuple[int, ...] = (0,)
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4
    max_target_len: int = 16
    init_std: float = 0.05
    seed: int = 0
    param_budget: int = 2_000_000

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(p) for p in self.prompt))
        counts = dict(
            visual_vocab=self.visual_vocab,
            text_vocab=self.text_vocab,
            output_vocab=self.output_vocab,
            grid_height=self.grid_height,
            grid_width=self.grid_width,
            text_len=self.text_len,
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            mlp_ratio=self.mlp_ratio,
            max_target_len=self.max_target_len,
        )
        for name, value in counts.items():
            if int(value) < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.output_vocab < 3:
            raise ConfigError("output_vocab must hold separator, end symbol and a word")
        if not self.prompt:
            raise ConfigError("prompt needs at least one token")
        if any(not 0 <= p < self.text_vocab for p in self.prompt):
            raise ConfigError("prompt ids must lie in the text vocabulary")
        n = parameter_count(self)
        if n > self.param_budget:
            raise ConfigError(f"{n} parameters exceed the budget of {self.param_budget}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (self.grid_height, self.grid_width)

    @property
    def n_visual(self) -> int:
        return self.grid_height * self.grid_width

    @property
    def prefix_len(self) -> int:
        return self.n_visual + self.text_len + len(self.prompt)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prompt"] = list(self.prompt)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["prompt"] = tuple(d.get("prompt", (0,)))
        return cls(**d)


def layout_table(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list; embedding and position tables stay adjacent."""
    D, F = config.embed_dim, config.embed_dim * config.mlp_ratio
    table = [
        ("emb.visual", (config.visual_vocab, D)),
        ("emb.text", (config.text_vocab, D)),
        ("emb.target", (config.output_vocab, D)),
        ("pos.row", (config.grid_height, D)),
        ("pos.col", (config.grid_width, D)),
        ("pos.text", (config.text_len + len(config.prompt), D)),
        ("pos.target", (config.max_target_len, D)),
    ]
    for i in range(config.num_layers):
        p = f"block{i}."
        table += [
            (p + "ln1.g", (D,)),
            (p + "ln1.b", (D,)),
            (p + "attn.wqkv", (D, 3 * D)),
            (p + "attn.bqkv", (3 * D,)),
            (p + "attn.wo", (D, D)),
            (p + "attn.bo", (D,)),
            (p + "ln2.g", (D,)),
            (p + "ln2.b", (D,)),
            (p + "mlp.w1", (D, F)),
            (p + "mlp.b1", (F,)),
            (p + "mlp.w2", (F, D)),
            (p + "mlp.b2", (D,)),
        ]
    table += [
        ("lnf.g", (D,)),
        ("lnf.b", (D,)),
        ("out.w", (D, config.output_vocab)),
        ("out.b", (config.output_vocab,)),
    ]
    return table


@dataclass(frozen=True)
class Layout:
    entries: tuple[tuple[str, int, tuple[int, ...]], ...]
    size: int

    @classmethod
    def of(cls, config: ModelConfig) -> "Layout":
        entries, offset = [], 0
        for name, shape in layout_table(config):
            entries.append((name, offset, shape))
            offset += int(np.prod(shape))
        return cls(tuple(entries), offset)

    def __iter__(self) -> Iterator[tuple[str, int, tuple[int, ...]]]:
        return iter(self.entries)

    def slice(self, name: str) -> slice:
        for n, off, shape in self.entries:
            if n == name:
                return slice(off, off + int(np.prod(shape)))
        raise KeyError(name)

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        """Named views into ``flat``; a leading batch axis is preserved."""
        lead = flat.shape[:-1]
        return {
            n: flat[..., off : off + size].reshape(lead + shape)
            for (n, off, shape), size in zip(self.entries, self._sizes)
        }

    @property
    def _sizes(self) -> list[int]:
        return [math.prod(shape) for _, _, shape in self.entries]

    def span(self, first: str, last: str) -> slice:
        return slice(self.slice(first).start, self.slice(last).stop)

    def digest(self) -> str:
        blob = json.dumps([[n, off, list(s)] for n, off, s in self.entries]).encode()
        return hashlib.sha256(blob).hexdigest()


def parameter_count(config: ModelConfig) -> int:
    return Layout.of(config).size


@dataclass
class ModelParams:
    config: ModelConfig
    flat: np.ndarray
    layout: Layout = field(init=False)

    def __post_init__(self):
        self.layout = Layout.of(self.config)
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.layout.size,):
            raise ConfigError(
                f"parameter vector has {self.flat.shape}, layout needs {self.layout.size}"
            )

    def views(self) -> dict[str, np.ndarray]:
        return self.layout.views(self.flat)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.flat.copy())

    def digest(self) -> str:
        return hashlib.sha256(self.flat.tobytes()).hexdigest()[:16]


def init_model(config: ModelConfig) -> ModelParams:
    """Seeded initialization; the output projection starts at zero (uniform logits)."""
    layout = Layout.of(config)
    if layout.size > config.param_budget:
        raise ConfigError(f"{layout.size} parameters exceed budget {config.param_budget}")
    rng = np.random.default_rng([config.seed, 0x5EED])
    flat = np.zeros(layout.size)
    v = layout.views(flat)
    std = config.init_std
    resid_std = std / np.sqrt(2 * config.num_layers)
    for name, arr in v.items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith(("emb.", "pos.")):
            arr[...] = rng.normal(0.0, std, arr.shape)
        elif leaf == "g":
            arr[...] = 1.0
        elif leaf in ("wqkv", "w1"):
            arr[...] = rng.normal(0.0, std, arr.shape)
        elif leaf in ("wo", "w2"):
            arr[...] = rng.normal(0.0, resid_std, arr.shape)
        # biases, layernorm shifts, out.w and out.b stay zero
    return ModelParams(config, flat)


@dataclass
class Sample:
    """One paired input with its serialized keyphrase target.

    ``target`` holds output-vocab ids with separators between phrases and a
    terminal end symbol. ``visual_visible``/``text_visible`` are cleared by
    modality ablation.
    """

    grid: np.ndarray
    text: np.ndarray
    target: np.ndarray
    sample_id: str = ""
    keyphrases: tuple[str, ...] = ()
    visual_visible: bool = True
    text_visible: bool = True

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.int64)
        self.text = np.asarray(self.text, dtype=np.int64)
        self.target = np.asarray(self.target, dtype=np.int64)
        if self.grid.ndim != 2:
            raise ConfigError("grid must be 2D")
        if self.text.ndim != 1:
            raise ConfigError("text must be 1D")
        if self.target.ndim != 1 or self.target.size == 0:
            raise ConfigError("target must be a non-empty 1D sequence")

    def validate(self, config: ModelConfig) -> None:
        if self.grid.shape != config.grid_shape:
            raise ConfigError(f"grid {self.grid.shape} != config {config.grid_shape}")
        if self.text.shape != (config.text_len,):
            raise ConfigError(f"text length {self.text.size} != config {config.text_len}")
        if self.target.size > config.max_target_len:
            raise ConfigError("target longer than max_target_len")
        for arr, bound, what in (
            (self.grid, config.visual_vocab, "visual"),
            (self.text, config.text_vocab, "text"),
            (self.target, config.output_vocab, "output"),
        ):
            if arr.size and (arr.min() < 0 or arr.max() >= bound):
                raise ConfigError(f"{what} token id out of range [0, {bound})")
