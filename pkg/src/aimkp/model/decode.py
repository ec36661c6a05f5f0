"""Autoregressive keyphrase decoding: batched greedy and beam search with sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..masking import unmasked_plan
from .network import _log_softmax, encode_batch, logits_last
from .params import EOS_ID, SEP_ID, ModelParams, Sample


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"  # or "beam-sample"
    beam_size: int = 5
    temperature: float = 0.5
    seed: int = 0
    max_len: int | None = None

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam-sample"):
            raise ValueError(f"unknown decoding strategy {self.strategy!r}")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def split_phrases(tokens: Sequence[int]) -> list[tuple[int, ...]]:
    """Cut a generated stream at separators; stops at the end symbol. Order = rank."""
    phrases, cur = [], []
    for t in tokens:
        t = int(t)
        if t == EOS_ID:
            break
        if t == SEP_ID:
            if cur:
                phrases.append(tuple(cur))
            cur = []
        else:
            cur.append(t)
    if cur:
        phrases.append(tuple(cur))
    return phrases


def phrases_to_strings(phrases: Sequence[tuple[int, ...]], words: Sequence[str]) -> list[str]:
    return [" ".join(words[t] for t in p) for p in phrases]


def _max_len(params: ModelParams, cfg: DecodeConfig) -> int:
    limit = params.config.max_target_len
    if cfg.max_len is None:
        return limit
    if cfg.max_len > limit:
        raise ValueError(f"max_len {cfg.max_len} exceeds model max_target_len {limit}")
    return cfg.max_len


def _step_logits(params, samples, prefixes):
    cfg = params.config
    plan = unmasked_plan(cfg.grid_shape, cfg.text_len)
    batch = encode_batch(cfg, [(s, plan) for s in samples], target_inputs=prefixes)
    return logits_last(params, batch)


def greedy_tokens(params: ModelParams, samples: Sequence[Sample], max_len: int) -> list[list[int]]:
    """Lock-step argmax decoding; finished rows keep running but are ignored."""
    out = [[] for _ in samples]
    done = np.zeros(len(samples), dtype=bool)
    for _ in range(max_len):
        logits = _step_logits(params, samples, out)
        nxt = logits.argmax(axis=-1)
        for b, t in enumerate(nxt):
            # finished rows are padded with the end symbol so prefixes stay aligned
            out[b].append(EOS_ID if done[b] else int(t))
        done |= nxt == EOS_ID
        if done.all():
            break
    return [seq[: seq.index(EOS_ID) + 1] if EOS_ID in seq else seq for seq in out]


def beam_sample_tokens(
    params: ModelParams,
    sample: Sample,
    beam_size: int,
    temperature: float,
    rng: np.random.Generator,
    max_len: int,
) -> list[int]:
    """Beam search whose expansions are sampled without replacement.

    Candidates are drawn from softmax(beam score + log p / temperature) with the
    Gumbel top-k trick; the surviving beams are the best-scoring draws.
    Finished hypotheses are ranked by length-normalized log probability.
    """
    beams: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[float, list[int]]] = []
    for step in range(max_len):
        logits = _step_logits(params, [sample] * len(beams), [b[0] for b in beams])
        logp = _log_softmax(logits / temperature)
        scores = np.array([b[1] for b in beams])[:, None] + logp
        flat = scores.ravel()
        keys = flat + rng.gumbel(size=flat.shape)
        n_draw = min(2 * beam_size, flat.size)
        drawn = np.argpartition(-keys, n_draw - 1)[:n_draw]
        drawn = drawn[np.argsort(-flat[drawn], kind="stable")]
        new_beams = []
        V = logp.shape[1]
        for idx in drawn:
            bi, tok = divmod(int(idx), V)
            seq = beams[bi][0] + [tok]
            if tok == EOS_ID:
                finished.append((flat[idx] / len(seq), seq))
            else:
                new_beams.append((seq, float(flat[idx])))
            if len(new_beams) == beam_size:
                break
        beams = new_beams
        if len(finished) >= beam_size or not beams:
            break
    if not finished:
        finished = [(score / max(1, len(seq)), seq) for seq, score in beams]
    finished.sort(key=lambda f: -f[0])
    return finished[0][1] if finished else []


def decode(
    params: ModelParams,
    samples: Sample | Sequence[Sample],
    config: DecodeConfig = DecodeConfig(),
) -> list[list[tuple[int, ...]]] | list[tuple[int, ...]]:
    """Generate ordered keyphrase token tuples for one sample or a list of them."""
    single = isinstance(samples, Sample)
    batch = [samples] if single else list(samples)
    max_len = _max_len(params, config)
    if config.strategy == "greedy":
        streams = greedy_tokens(params, batch, max_len)
    else:
        streams = []
        for i, s in enumerate(batch):
            rng = np.random.default_rng([config.seed, i])
            streams.append(
                beam_sample_tokens(params, s, config.beam_size, config.temperature, rng, max_len)
            )
    result = [split_phrases(s) for s in streams]
    return result[0] if single else result
