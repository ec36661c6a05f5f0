"""Post-hoc analyses: similarity vs. perplexity-ratio correlation, telemetry rederivation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .masking import compose_mask_plan, stride_cap, unmasked_plan
from .model.network import batch_grad, encode_batch
from .model.params import ModelParams, Sample
from .objective import DECISION_FIELDS, MODALITIES, aggregate_telemetry, cosine_similarity, telemetry_csv


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class VariantPoint:
    sample_id: str
    modality: str
    gamma: int
    cos_sim: float
    ppl_ratio: float


@dataclass(frozen=True)
class CorrelationResult:
    points: list[VariantPoint]
    rho: float | None
    p_value: float | None
    degenerate: bool

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "modality", "gamma", "cos_sim", "ppl_ratio"])
        for p in self.points:
            w.writerow([p.sample_id, p.modality, p.gamma, repr(p.cos_sim), repr(p.ppl_ratio)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "n_variants": len(self.points),
            "spearman_rho": self.rho,
            "p_value": self.p_value,
            "degenerate": self.degenerate,
        }


def default_strides(params: ModelParams) -> dict[str, list[int]]:
    cfg = params.config
    caps = {"visual": stride_cap(min(cfg.grid_shape)), "text": stride_cap(cfg.text_len)}
    return {m: [g for g in (2, 4, 8) if g <= caps[m]] for m in MODALITIES}


def similarity_vs_perplexity(
    params: ModelParams,
    samples: Sequence[Sample],
    strides: dict[str, Sequence[int]] | None = None,
    chunk: int = 8,
) -> CorrelationResult:
    """Gradient cosine similarity against masked/unmasked perplexity ratio.

    Every sample contributes one variant per (modality, stride). Spearman's rho
    is left undefined (``degenerate``) when either coordinate is constant.
    """
    cfg = params.config
    strides = strides or default_strides(params)
    full = unmasked_plan(cfg.grid_shape, cfg.text_len)
    variants = [(m, g) for m in MODALITIES for g in strides.get(m, ())]
    if not variants:
        raise AnalysisError("no masked variants requested")
    points = []
    for start in range(0, len(samples), chunk):
        part = samples[start : start + chunk]
        items = []
        for s in part:
            items.append((s, full))
            for m, g in variants:
                items.append(
                    (s, compose_mask_plan(cfg.grid_shape, cfg.text_len, g, g, target=m))
                )
        nll, G = batch_grad(params, encode_batch(cfg, items), per_example=True)
        stride = 1 + len(variants)
        for i, s in enumerate(part):
            base = i * stride
            for j, (m, g) in enumerate(variants, start=1):
                points.append(
                    VariantPoint(
                        s.sample_id,
                        m,
                        g,
                        cosine_similarity(G[base], G[base + j]),
                        math.exp(nll[base + j] - nll[base]),
                    )
                )
    x = np.array([p.cos_sim for p in points])
    y = np.array([p.ppl_ratio for p in points])
    if len(points) < 3 or np.ptp(x) < 1e-12 or np.ptp(y) < 1e-12:
        return CorrelationResult(points, None, None, True)
    res = spearmanr(x, y)
    rho, pv = float(res.statistic), float(res.pvalue)
    if not math.isfinite(rho):
        return CorrelationResult(points, None, None, True)
    return CorrelationResult(points, rho, pv, False)


# -- decision logs ------------------------------------------------------------


def write_decisions(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({k: r[k] for k in DECISION_FIELDS}) + "\n")


def read_decisions(path) -> list[dict]:
    out = []
    with open(Path(path)) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnalysisError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            missing = [k for k in DECISION_FIELDS if k not in rec]
            if missing:
                raise AnalysisError(f"{path}:{lineno}: missing {', '.join(missing)}")
            out.append(rec)
    return out


def rederive_telemetry(decision_log) -> str:
    """Telemetry CSV text recomputed from a decision log file."""
    return telemetry_csv(aggregate_telemetry(read_decisions(decision_log)))
