"""Gradient-filtered masking objective, per-sample stride curriculum, training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .masking import MaskPlan, compose_mask_plan, stride_cap, unmasked_plan
from .metrics import evaluate_corpus
from .model.decode import DecodeConfig, decode, phrases_to_strings
from .model.network import GradientVector, NumericError, batch_grad, encode_batch
from .model.optim import Adam, cosine_lr
from .model.params import ModelParams, Sample, init_model

log = logging.getLogger(__name__)

MODALITIES = ("visual", "text")
DEGENERATE_NORM = 1e-12
TELEMETRY_FIELDS = (
    "epoch",
    "modality",
    "mean_cos_sim",
    "std_cos_sim",
    "pct_above_threshold",
    "mean_stride",
    "accepted_count",
    "rejected_count",
)
DECISION_FIELDS = (
    "sample_id",
    "epoch",
    "s_v",
    "s_t",
    "lambda_v",
    "lambda_t",
    "gamma_v",
    "gamma_t",
    "loss",
    "loss_v_masked",
    "loss_t_masked",
)


class TrainingError(RuntimeError):
    pass


class EmptySplitError(TrainingError):
    pass


class TrainingDiverged(TrainingError):
    """Non-finite loss or gradient; ``result`` holds the last good state."""

    def __init__(self, message: str, result: "TrainResult"):
        super().__init__(message)
        self.result = result


def _as_array(g) -> np.ndarray:
    return g.values if isinstance(g, GradientVector) else np.asarray(g, dtype=np.float64)


def cosine_similarity(g, g_masked) -> float:
    a, b = _as_array(g), _as_array(g_masked)
    if a.shape != b.shape:
        raise ValueError(f"gradient lengths differ: {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        log.warning("degenerate gradient (norms %.3g, %.3g); similarity set to 0", na, nb)
        return 0.0
    return float(min(1.0, max(-1.0, np.dot(a, b) / (na * nb))))


def filter_switch(s: float, tau: float) -> int:
    return int(s >= tau)


@dataclass(frozen=True)
class FilterDecision:
    s_visual: float | None
    s_text: float | None
    lambda_visual: int
    lambda_text: int
    tau_visual: float
    tau_text: float


def decide(s_visual, s_text, tau_visual: float, tau_text: float) -> FilterDecision:
    """A modality whose variant was not built (``None``) is never switched on."""
    lv = 0 if s_visual is None else filter_switch(s_visual, tau_visual)
    lt = 0 if s_text is None else filter_switch(s_text, tau_text)
    return FilterDecision(s_visual, s_text, lv, lt, tau_visual, tau_text)


def total_gradient(g, g_v_masked, g_t_masked, decision: FilterDecision, weights=(1.0, 1.0)):
    """g + lambda_V * w_V * g_V + lambda_T * w_T * g_T.

    Off switches contribute nothing at all (not even +0.0), so a fully rejected
    step is bitwise the plain gradient.
    """
    base = _as_array(g)
    out = base.copy()
    for lam, gm, w in (
        (decision.lambda_visual, g_v_masked, weights[0]),
        (decision.lambda_text, g_t_masked, weights[1]),
    ):
        if gm is None:
            if lam:
                raise ValueError("switch is on but the masked gradient is missing")
            continue
        gm = _as_array(gm)
        if gm.shape != base.shape:
            raise ValueError(f"gradient lengths differ: {base.shape} vs {gm.shape}")
        if lam:
            out += gm if w == 1.0 else w * gm
    return GradientVector(out)


# -- strides ----------------------------------------------------------------


@dataclass
class StrideState:
    gammas: dict[str, dict[str, int]]
    caps: dict[str, int]
    epoch_index: int = 0

    @classmethod
    def create(cls, sample_ids: Iterable[str], grid_shape, text_len: int, gamma_init: int = 2):
        caps = {"visual": stride_cap(min(grid_shape)), "text": stride_cap(text_len)}
        for m, cap in caps.items():
            if gamma_init > cap:
                raise TrainingError(f"initial stride {gamma_init} exceeds the {m} cap {cap}")
        if gamma_init < 2 or gamma_init & (gamma_init - 1):
            raise TrainingError("initial stride must be a power of two >= 2")
        ids = list(sample_ids)
        if len(set(ids)) != len(ids):
            raise TrainingError("sample ids must be unique")
        return cls({i: {"visual": gamma_init, "text": gamma_init} for i in ids}, caps)

    def get(self, sample_id: str, modality: str) -> int:
        try:
            return self.gammas[sample_id][modality]
        except KeyError:
            raise KeyError(f"unknown sample {sample_id!r}") from None


def next_stride(gamma: int, lam: int, cap: int) -> int:
    return min(2 * gamma, cap) if lam else max(gamma // 2, 2)


def update_stride(state: StrideState, sample_id: str, modality: str, lam: int) -> StrideState:
    """Double on acceptance (up to the cap), halve on rejection (floor 2). In place."""
    if sample_id not in state.gammas:
        raise KeyError(f"unknown sample {sample_id!r}")
    entry = state.gammas[sample_id]
    entry[modality] = next_stride(entry[modality], lam, state.caps[modality])
    return state


# -- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    warmup_epochs: int = 1
    tau_v: float = 0.4
    tau_t: float = 0.1
    gamma_init: int = 2
    schedule: str = "aimkp"
    seed: int = 0
    accumulation: int = 8
    lr: float = 3e-3
    warmup_ratio: float = 0.03
    stride_mode: str = "per-sample"  # or "global"
    mask_pattern: str = "structured"  # or "random"
    convention: str = "last-in-stride"
    aux_weight_v: float = 1.0
    aux_weight_t: float = 1.0
    val_samples: int | None = None
    validate: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise TrainingError("epoch counts must be >= 0")
        if self.accumulation < 1:
            raise TrainingError("accumulation must be >= 1")
        if self.stride_mode not in ("per-sample", "global"):
            raise TrainingError(f"unknown stride mode {self.stride_mode!r}")
        if self.mask_pattern not in ("structured", "random"):
            raise TrainingError(f"unknown mask pattern {self.mask_pattern!r}")
        parse_schedule(self.schedule)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Schedule:
    name: str
    masked: tuple[str, ...]  # modalities that get masked variants
    fixed_gamma: int | None = None
    filtering: bool = True


def parse_schedule(name: str) -> Schedule:
    if name in ("aimkp", "adaptive"):
        return Schedule(name, MODALITIES)
    if name == "baseline":
        return Schedule(name, ())
    if name == "no-filter":
        return Schedule(name, MODALITIES, filtering=False)
    if name == "mask-text-only":
        return Schedule(name, ("text",))
    if name == "mask-image-only":
        return Schedule(name, ("visual",))
    if name.startswith("fixed:"):
        try:
            gamma = int(name.split(":", 1)[1])
        except ValueError:
            raise TrainingError(f"bad fixed stride in {name!r}") from None
        if gamma < 2 or gamma & (gamma - 1):
            raise TrainingError("fixed stride must be a power of two >= 2")
        return Schedule(name, MODALITIES, fixed_gamma=gamma)
    raise TrainingError(f"unknown schedule {name!r}")


def effective_taus(config: TrainConfig) -> tuple[float, float]:
    if not parse_schedule(config.schedule).filtering:
        return -1.0, -1.0
    return config.tau_v, config.tau_t


# -- records ------------------------------------------------------------------


@dataclass(frozen=True)
class TelemetryRecord:
    epoch: int
    modality: str
    mean_cos_sim: float
    std_cos_sim: float
    pct_above_threshold: float
    mean_stride: float
    accepted_count: int
    rejected_count: int

    def row(self) -> list[str]:
        return [repr(v) if isinstance(v, float) else str(v) for v in asdict(self).values()]


def aggregate_telemetry(decisions: Iterable[dict]) -> list[TelemetryRecord]:
    """Per (epoch, modality) summaries; exact sums make the result order-free."""
    groups: dict[tuple[int, str], list[tuple[float, int, int]]] = {}
    for d in decisions:
        for m, s_key, l_key, g_key in (
            ("visual", "s_v", "lambda_v", "gamma_v"),
            ("text", "s_t", "lambda_t", "gamma_t"),
        ):
            if d[s_key] is None:
                continue
            groups.setdefault((int(d["epoch"]), m), []).append(
                (float(d[s_key]), int(d[l_key]), int(d[g_key]))
            )
    out = []
    for (epoch, m) in sorted(groups, key=lambda k: (k[0], MODALITIES.index(k[1]))):
        rows = groups[(epoch, m)]
        n = len(rows)
        mean = math.fsum(r[0] for r in rows) / n
        var = math.fsum((r[0] - mean) ** 2 for r in rows) / n
        acc = sum(r[1] for r in rows)
        out.append(
            TelemetryRecord(
                epoch=epoch,
                modality=m,
                mean_cos_sim=mean,
                std_cos_sim=math.sqrt(var),
                pct_above_threshold=100.0 * acc / n,
                mean_stride=math.fsum(r[2] for r in rows) / n,
                accepted_count=acc,
                rejected_count=n - acc,
            )
        )
    return out


def telemetry_csv(records: Sequence[TelemetryRecord]) -> str:
    lines = [",".join(TELEMETRY_FIELDS)]
    lines += [",".join(r.row()) for r in records]
    return "\n".join(lines) + "\n"


@dataclass
class EpochLog:
    epoch: int
    phase: str  # "warmup" or "curriculum"
    mean_loss: float
    val_composite: float | None = None
    lr_end: float = 0.0


@dataclass
class TrainResult:
    final: ModelParams
    best: ModelParams
    best_score: float | None
    best_epoch: int | None
    telemetry: list[TelemetryRecord]
    decisions: list[dict]
    history: list[EpochLog]
    strides: StrideState | None = None


# -- steps --------------------------------------------------------------------


@dataclass
class StepContext:
    """Everything a step needs besides the sample itself."""

    config: TrainConfig
    schedule: Schedule
    state: StrideState | None
    epoch: int
    curriculum_epoch: int  # 0 for the first post-warm-up epoch
    rng_seed: int = 0

    def stride(self, sample: Sample, modality: str) -> int:
        if self.schedule.fixed_gamma is not None:
            return self.schedule.fixed_gamma
        if self.config.stride_mode == "global":
            cap = self.state.caps[modality]
            return min(self.config.gamma_init << self.curriculum_epoch, cap)
        return self.state.get(sample.sample_id, modality)


def _plans_for(params: ModelParams, sample: Sample, ctx: StepContext, index: int):
    cfg = params.config
    plans: dict[str, MaskPlan | None] = {}
    gammas: dict[str, int | None] = {}
    for k, m in enumerate(MODALITIES):
        if m not in ctx.schedule.masked:
            plans[m], gammas[m] = None, None
            continue
        gamma = ctx.stride(sample, m)
        rng = None
        if ctx.config.mask_pattern == "random":
            rng = np.random.default_rng([ctx.config.seed, ctx.epoch, index, k])
        plans[m] = compose_mask_plan(
            cfg.grid_shape,
            cfg.text_len,
            gamma_visual=gamma if m == "visual" else None,
            gamma_text=gamma if m == "text" else None,
            target=m,
            convention=ctx.config.convention,
            pattern=ctx.config.mask_pattern,
            rng=rng,
        )
        gammas[m] = gamma
    return plans, gammas


def window_gradient(
    params: ModelParams,
    samples: Sequence[Sample],
    ctx: StepContext,
    start_index: int = 0,
):
    """Per-sample decisions and the summed filtered gradient for one window.

    The original, visual-masked and text-masked variants of every sample go
    through one batched backward pass with per-example gradients.
    """
    cfg = params.config
    full = unmasked_plan(cfg.grid_shape, cfg.text_len)
    items, layout = [], []
    meta = []
    for i, s in enumerate(samples):
        plans, gammas = _plans_for(params, s, ctx, start_index + i)
        row = {"full": len(items)}
        items.append((s, full))
        for m in MODALITIES:
            if plans[m] is not None:
                row[m] = len(items)
                items.append((s, plans[m]))
        layout.append(row)
        meta.append(gammas)
    nll, G = batch_grad(params, encode_batch(cfg, items), per_example=True)
    tau_v, tau_t = effective_taus(ctx.config)
    weights = (ctx.config.aux_weight_v, ctx.config.aux_weight_t)
    total = np.zeros(params.layout.size)
    records = []
    for s, row, gammas in zip(samples, layout, meta):
        g = G[row["full"]]
        gv = G[row["visual"]] if "visual" in row else None
        gt = G[row["text"]] if "text" in row else None
        s_v = cosine_similarity(g, gv) if gv is not None else None
        s_t = cosine_similarity(g, gt) if gt is not None else None
        decision = decide(s_v, s_t, tau_v, tau_t)
        total += total_gradient(g, gv, gt, decision, weights).values
        records.append(
            {
                "sample_id": s.sample_id,
                "epoch": ctx.epoch,
                "s_v": s_v,
                "s_t": s_t,
                "lambda_v": decision.lambda_visual,
                "lambda_t": decision.lambda_text,
                "gamma_v": gammas["visual"],
                "gamma_t": gammas["text"],
                "loss": float(nll[row["full"]]),
                "loss_v_masked": float(nll[row["visual"]]) if "visual" in row else None,
                "loss_t_masked": float(nll[row["text"]]) if "text" in row else None,
            }
        )
    return total, records


def plain_gradient(params: ModelParams, samples: Sequence[Sample]):
    """Summed plain gradient over a window, via the same per-example route."""
    cfg = params.config
    full = unmasked_plan(cfg.grid_shape, cfg.text_len)
    nll, G = batch_grad(params, encode_batch(cfg, [(s, full) for s in samples]), per_example=True)
    total = np.zeros(params.layout.size)
    for row in G:
        total += row
    return total, nll


def apply_decisions(ctx: StepContext, records: Sequence[dict]) -> None:
    """Stride transitions; skipped modalities and fixed/global modes stay frozen."""
    if ctx.schedule.fixed_gamma is not None or ctx.config.stride_mode == "global":
        return
    for r in records:
        for m, lam_key, g_key in (("visual", "lambda_v", "gamma_v"), ("text", "lambda_t", "gamma_t")):
            if r[g_key] is None:
                continue
            update_stride(ctx.state, r["sample_id"], m, r[lam_key])


def train_step(
    params: ModelParams,
    sample: Sample,
    state: StrideState | None,
    config: TrainConfig,
    optimizer: Adam,
    lr: float | None = None,
    epoch: int = 1,
):
    """One post-warm-up update on a single sample (a window of one).

    Returns ``(update, decision, record)``; ``params`` is updated in place and
    ``update`` is the applied parameter delta.
    """
    schedule = parse_schedule(config.schedule)
    ctx = StepContext(config, schedule, state, epoch, max(0, epoch - config.warmup_epochs))
    before = params.flat.copy()
    grad, records = window_gradient(params, [sample], ctx)
    optimizer.step(params.flat, grad, lr)
    apply_decisions(ctx, records)
    r = records[0]
    tau_v, tau_t = effective_taus(config)
    decision = decide(r["s_v"], r["s_t"], tau_v, tau_t)
    return params.flat - before, decision, r


def plain_step(params: ModelParams, sample: Sample, optimizer: Adam, lr: float | None = None):
    before = params.flat.copy()
    grad, _ = plain_gradient(params, [sample])
    optimizer.step(params.flat, grad, lr)
    return params.flat - before


# -- loop ---------------------------------------------------------------------


def validation_score(params: ModelParams, samples: Sequence[Sample], words: Sequence[str]) -> float:
    """Composite (mean of F1@1, F1@3, MAP@5) under greedy decoding."""
    preds = decode(params, list(samples), DecodeConfig("greedy"))
    pairs = [(phrases_to_strings(p, words), list(s.keyphrases)) for p, s in zip(preds, samples)]
    return evaluate_corpus(pairs).composite


def run_training(
    train: Sequence[Sample],
    valid: Sequence[Sample],
    params: ModelParams,
    config: TrainConfig,
    words: Sequence[str] | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Warm-up epochs on plain data, then filtered masking epochs.

    ``params`` is not modified; the returned ``final`` and ``best`` are copies.
    Without ``words`` (output vocabulary strings) validation is skipped and the
    best checkpoint is the final one.
    """
    if not train:
        raise EmptySplitError("empty training split")
    if config.validate and words is not None and not valid:
        raise EmptySplitError("empty validation split")
    schedule = parse_schedule(config.schedule)
    cfg = params.config
    work = params.copy()
    opt = Adam(work.layout.size, lr=config.lr)
    windows_per_epoch = -(-len(train) // config.accumulation)
    total_steps = windows_per_epoch * (config.warmup_epochs + config.epochs)
    state = None
    if schedule.masked:
        state = StrideState.create(
            (s.sample_id for s in train), cfg.grid_shape, cfg.text_len, config.gamma_init
        )
        if schedule.fixed_gamma is not None:
            for m in schedule.masked:
                limit = min(cfg.grid_shape) if m == "visual" else cfg.text_len
                if schedule.fixed_gamma > limit:
                    raise TrainingError(
                        f"fixed stride {schedule.fixed_gamma} exceeds the {m} axis length {limit}"
                    )
    val = list(valid)[: config.val_samples] if config.val_samples else list(valid)
    do_val = config.validate and words is not None and bool(val)

    decisions: list[dict] = []
    history: list[EpochLog] = []
    best, best_score, best_epoch = work.copy(), None, None
    step = 0

    def snapshot(msg):
        result = TrainResult(
            work.copy(), best.copy(), best_score, best_epoch,
            aggregate_telemetry(decisions), decisions, history, state,
        )
        return TrainingDiverged(msg, result)

    for epoch in range(config.warmup_epochs + config.epochs):
        warm = epoch < config.warmup_epochs
        curriculum = schedule.masked and not warm
        ctx = StepContext(config, schedule, state, epoch, epoch - config.warmup_epochs)
        if state is not None:
            state.epoch_index = epoch
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train))
        losses = []
        lr = config.lr
        for w in range(windows_per_epoch):
            idx = order[w * config.accumulation : (w + 1) * config.accumulation]
            window = [train[i] for i in idx]
            lr = cosine_lr(step, total_steps, config.lr, config.warmup_ratio)
            last_good = work.flat.copy()
            try:
                if curriculum:
                    grad, records = window_gradient(work, window, ctx, w * config.accumulation)
                    losses += [r["loss"] for r in records]
                else:
                    grad, nll = plain_gradient(work, window)
                    records = []
                    losses += nll.tolist()
                opt.step(work.flat, grad, lr)
                if not np.all(np.isfinite(work.flat)):
                    raise NumericError("non-finite parameters after update")
            except NumericError as exc:
                work.flat[:] = last_good
                log.error("epoch %d window %d: %s", epoch, w, exc)
                raise snapshot(f"diverged at epoch {epoch}, window {w}: {exc}") from exc
            if curriculum:
                apply_decisions(ctx, records)
                decisions += records
            step += 1
        entry = EpochLog(
            epoch, "warmup" if warm else "curriculum", math.fsum(losses) / len(losses), lr_end=lr
        )
        if do_val:
            entry.val_composite = validation_score(work, val, words)
            if best_score is None or entry.val_composite > best_score:
                best, best_score, best_epoch = work.copy(), entry.val_composite, epoch
        else:
            best, best_epoch = work.copy(), epoch
        history.append(entry)
        if on_epoch:
            on_epoch(entry)
        log.info("epoch %d (%s) loss %.4f val %s", epoch, entry.phase, entry.mean_loss, entry.val_composite)

    return TrainResult(
        work, best, best_score, best_epoch, aggregate_telemetry(decisions), decisions, history, state
    )


def train_from_scratch(train, valid, model_config, config: TrainConfig, words=None, **kw) -> TrainResult:
    """Initialize with ``model_config`` (its seed bumped by the run seed) and train."""
    params = init_model(replace(model_config, seed=model_config.seed + config.seed))
    return run_training(train, valid, params, config, words, **kw)
