"""Keyphrase evaluation: stemming, deduplication, F1@K with empty-label padding, MAP@K."""

from __future__ import annotations

import csv
import io
import json
import string
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .porter import porter_stem

__all__ = [
    "EvalReport",
    "MetricError",
    "evaluate_corpus",
    "f1_at_k",
    "load_predictions",
    "map_at_k",
    "normalize_phrase",
    "normalize_phrases",
    "porter_stem",
    "report_csv",
    "report_text",
]

CONDITIONS = ("multimodal", "text-only", "image-only")
_PUNCT = str.maketrans("", "", string.punctuation)


class MetricError(ValueError):
    pass


def normalize_phrase(phrase: str) -> str:
    tokens = (tok.translate(_PUNCT) for tok in phrase.lower().split())
    return " ".join(porter_stem(tok) for tok in tokens if tok)


def normalize_phrases(phrases: Iterable[str]) -> list[str]:
    """Lowercase, strip punctuation, stem token-wise, drop empties and later duplicates."""
    seen, out = set(), []
    for p in phrases:
        n = normalize_phrase(p)
        if n and n not in seen:
            seen.add(n)
            out.append(n)
    return out


def _check(gold, k):
    if k < 1:
        raise MetricError("K must be >= 1")
    if not gold:
        raise MetricError("gold keyphrase set is empty")


def f1_at_k(preds: Sequence[str], gold: Iterable[str], k: int) -> float:
    """Top-K F1; fewer than K predictions are padded with never-matching empty labels."""
    gold = set(gold)
    _check(gold, k)
    hits = sum(1 for p in preds[:k] if p in gold)
    if hits == 0:
        return 0.0
    # exact rationals so the score is the correctly rounded value
    precision = Fraction(hits, k)
    recall = Fraction(hits, len(gold))
    return float(2 * precision * recall / (precision + recall))


def map_at_k(preds: Sequence[str], gold: Iterable[str], k: int) -> float:
    """Average precision over the first K' = min(n, K) predictions in emission order.

    The denominator is min(|gold|, K').
    """
    gold = set(gold)
    _check(gold, k)
    k_eff = min(len(preds), k)
    if k_eff == 0:
        return 0.0
    hits, total = 0, Fraction(0)
    for rank, p in enumerate(preds[:k_eff], start=1):
        if p in gold:
            hits += 1
            total += Fraction(hits, rank)
    return float(total / min(len(gold), k_eff))


@dataclass(frozen=True)
class EvalReport:
    condition: str
    f1_at_1: float
    f1_at_3: float
    map_at_5: float
    n_samples: int

    @property
    def composite(self) -> float:
        return (self.f1_at_1 + self.f1_at_3 + self.map_at_5) / 3.0


def sample_scores(preds: Sequence[str], gold: Sequence[str]) -> tuple[float, float, float]:
    p, g = normalize_phrases(preds), normalize_phrases(gold)
    return f1_at_k(p, g, 1), f1_at_k(p, g, 3), map_at_k(p, g, 5)


def evaluate_corpus(
    pairs: Iterable[tuple[Sequence[str], Sequence[str]]], condition: str = "multimodal"
) -> EvalReport:
    """Macro averages over samples; both sides go through the same normalization."""
    if condition not in CONDITIONS:
        raise MetricError(f"unknown condition {condition!r}")
    scores = [sample_scores(p, g) for p, g in pairs]
    if not scores:
        raise MetricError("empty corpus")
    n = len(scores)
    return EvalReport(
        condition,
        sum(s[0] for s in scores) / n,
        sum(s[1] for s in scores) / n,
        sum(s[2] for s in scores) / n,
        n,
    )


def mean_reports(reports: Sequence[EvalReport]) -> EvalReport:
    if not reports:
        raise MetricError("no reports to average")
    n = len(reports)
    return EvalReport(
        reports[0].condition,
        sum(r.f1_at_1 for r in reports) / n,
        sum(r.f1_at_3 for r in reports) / n,
        sum(r.map_at_5 for r in reports) / n,
        reports[0].n_samples,
    )


def load_predictions(path) -> list[tuple[str, list[str], list[str]]]:
    """Read ``{"id", "preds", "gold"}`` JSONL records."""
    out = []
    with open(Path(path)) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append((str(rec["id"]), list(rec["preds"]), list(rec["gold"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise MetricError(f"{path}:{lineno}: bad prediction record ({exc})") from exc
    return out


REPORT_FIELDS = ("condition", "f1_at_1", "f1_at_3", "map_at_5", "n_samples")


def report_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(r).items()})
    return buf.getvalue()


def report_text(reports: Sequence[EvalReport]) -> str:
    lines = [f"{'condition':<12} {'F1@1':>7} {'F1@3':>7} {'MAP@5':>7} {'n':>6}"]
    for r in reports:
        lines.append(
            f"{r.condition:<12} {100 * r.f1_at_1:7.2f} {100 * r.f1_at_3:7.2f} "
            f"{100 * r.map_at_5:7.2f} {r.n_samples:6d}"
        )
    return "\n".join(lines)
