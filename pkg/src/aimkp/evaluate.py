"""Decode a split under an input condition and score it."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

from .data import apply_condition
from .metrics import EvalReport, evaluate_corpus, mean_reports
from .model.decode import DecodeConfig, decode, phrases_to_strings
from .model.params import ModelParams, Sample


def predict(
    params: ModelParams,
    samples: Sequence[Sample],
    words: Sequence[str],
    condition: str = "multimodal",
    config: DecodeConfig = DecodeConfig(),
) -> list[list[str]]:
    inputs = [apply_condition(s, condition) for s in samples]
    return [phrases_to_strings(p, words) for p in decode(params, inputs, config)]


def evaluate_model(
    params: ModelParams,
    samples: Sequence[Sample],
    words: Sequence[str],
    condition: str = "multimodal",
    config: DecodeConfig = DecodeConfig(),
    repeats: int = 1,
) -> EvalReport:
    """Mean report over ``repeats`` decodes; repeat r uses seed ``config.seed + r``."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    reports = []
    for r in range(repeats):
        cfg = replace(config, seed=config.seed + r)
        preds = predict(params, samples, words, condition, cfg)
        reports.append(
            evaluate_corpus(zip(preds, (list(s.keyphrases) for s in samples)), condition)
        )
    return reports[0] if repeats == 1 else mean_reports(reports)
