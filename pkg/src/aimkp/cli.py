"""``aimkp`` command line: gen-data, train, eval, analyze, show-mask.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .analysis import AnalysisError, rederive_telemetry, similarity_vs_perplexity, write_decisions
from .data import DataError, GenSpec, generate_synthetic, load_dataset, save_dataset
from .masking import MaskError, build_stride_mask, retention_ratio
from .metrics import CONDITIONS, MetricError, evaluate_corpus, load_predictions, report_csv, report_text
from .model.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model.decode import DecodeConfig
from .model.network import NumericError
from .model.params import ConfigError, ModelConfig, init_model
from .evaluate import evaluate_model
from .objective import (
    EmptySplitError,
    TrainConfig,
    TrainingDiverged,
    TrainingError,
    run_training,
    telemetry_csv,
)

log = logging.getLogger("aimkp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# Defaults for config keys; a --config JSON file may set any of them and
# explicit flags win over the file.
GEN_DEFAULTS = {"n": 2000, "seed": 0, "grid": "6x6", "text_len": 12}
MODEL_DEFAULTS = {"embed_dim": 32, "num_layers": 2, "num_heads": 4, "mlp_ratio": 4, "init_std": 0.05}
TRAIN_DEFAULTS = {
    **MODEL_DEFAULTS,
    **{f.name: f.default for f in fields(TrainConfig)},
}
EVAL_DEFAULTS = {
    "split": "test",
    "condition": ["multimodal"],
    "strategy": "greedy",
    "beam": 5,
    "temperature": 0.5,
    "repeats": 1,
    "seed": 0,
    "limit": None,
}
ANALYZE_DEFAULTS = {"split": "test", "n_samples": 100}
DEFAULTS = {
    "gen-data": GEN_DEFAULTS,
    "train": TRAIN_DEFAULTS,
    "eval": EVAL_DEFAULTS,
    "analyze": ANALYZE_DEFAULTS,
    "show-mask": {"convention": "last-in-stride"},
}


def _parse_dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(x) for x in str(text).lower().split("x"))
    except ValueError:
        raise UsageError(f"bad shape {text!r}; use e.g. 6x6 or 12") from None
    if not dims or min(dims) < 1:
        raise UsageError(f"bad shape {text!r}")
    return dims


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aimkp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"aimkp {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    S = argparse.SUPPRESS

    g = sub.add_parser("gen-data", help="write a synthetic dataset", argument_default=S)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--grid", help="HxW, default 6x6")
    g.add_argument("--text-len", type=int)
    g.add_argument("--config")

    t = sub.add_parser("train", help="train under a schedule", argument_default=S)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument(
        "--schedule",
        help="aimkp | baseline | fixed:<gamma> | no-filter | mask-text-only | mask-image-only",
    )
    t.add_argument("--epochs", type=int)
    t.add_argument("--warmup-epochs", type=int)
    t.add_argument("--tau-v", type=float)
    t.add_argument("--tau-t", type=float)
    t.add_argument("--gamma-init", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--accumulation", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--stride-mode", choices=["per-sample", "global"])
    t.add_argument("--mask-pattern", choices=["structured", "random"])
    t.add_argument("--val-samples", type=int)
    t.add_argument("--embed-dim", type=int)
    t.add_argument("--num-layers", type=int)
    t.add_argument("--num-heads", type=int)
    t.add_argument("--config")

    e = sub.add_parser("eval", help="decode and score a checkpoint", argument_default=S)
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--split", choices=["train", "valid", "test"])
    e.add_argument("--condition", action="append", choices=list(CONDITIONS) + ["all"])
    e.add_argument("--strategy", choices=["greedy", "beam-sample"])
    e.add_argument("--beam", type=int)
    e.add_argument("--temperature", type=float)
    e.add_argument("--repeats", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--limit", type=int)
    e.add_argument("--predictions", help="score an existing id/preds/gold JSONL instead")
    e.add_argument("--out", help="CSV report path")
    e.add_argument("--config")

    a = sub.add_parser("analyze", help="fig3 correlation or telemetry rederivation", argument_default=S)
    a.add_argument("--what", required=True, choices=["fig3-correlation", "appendixC-curves"])
    a.add_argument("--checkpoint")
    a.add_argument("--data")
    a.add_argument("--split", choices=["train", "valid", "test"])
    a.add_argument("--n-samples", type=int)
    a.add_argument("--decisions")
    a.add_argument("--telemetry", help="training-time CSV to compare against")
    a.add_argument("--out")
    a.add_argument("--config")

    m = sub.add_parser("show-mask", help="print a stride mask", argument_default=S)
    m.add_argument("--shape", required=True, help="L or HxW")
    m.add_argument("--gamma", type=int, required=True)
    m.add_argument("--convention", choices=["last-in-stride", "formula-anchor"])
    return p


def effective_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults < config file < explicit flags."""
    conf = dict(DEFAULTS.get(command, {}))
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "config")}
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path) as fh:
                from_file = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a flat JSON object")
        known = set(conf) | set(flags) | _flag_names(command)
        unknown = sorted(set(from_file) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        conf.update(from_file)
    conf.update(flags)
    return conf


def _flag_names(command: str) -> set[str]:
    p = build_parser()
    sub = next(a for a in p._actions if isinstance(a, argparse._SubParsersAction))
    return {a.dest for a in sub.choices[command]._actions if a.dest != "help"}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def cmd_gen_data(conf: dict) -> int:
    H, W = _parse_dims(conf["grid"])
    spec = GenSpec(n_samples=conf["n"], seed=conf["seed"], grid_dims=(H, W), text_len=conf["text_len"])
    ds = generate_synthetic(spec)
    save_dataset(ds, conf["out"])
    out = Path(conf["out"])
    manifest = {"command": "gen-data", "config": conf, "gen_spec": spec.to_dict()}
    _write_text(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(ds.samples)} samples to {out}")
    return EXIT_OK


def _model_config(ds, conf: dict) -> ModelConfig:
    return ds.model_config(
        embed_dim=conf["embed_dim"],
        num_layers=conf["num_layers"],
        num_heads=conf["num_heads"],
        mlp_ratio=conf["mlp_ratio"],
        init_std=conf["init_std"],
        seed=conf["seed"],
    )


def cmd_train(conf: dict) -> int:
    tc = TrainConfig(**{f.name: conf[f.name] for f in fields(TrainConfig)})
    ds = load_dataset(conf["data"])
    mc = _model_config(ds, conf)
    out = Path(conf["out"])
    out.mkdir(parents=True, exist_ok=True)
    params = init_model(mc)
    train, valid = ds.split("train"), ds.split("valid")
    manifest = {
        "command": "train",
        "config": conf,
        "model_config": mc.to_dict(),
        "train_config": tc.to_dict(),
        "data_files": {
            p.name: _sha256(p) for p in sorted(Path(conf["data"]).glob("*")) if p.is_file()
        },
        "init_digest": params.digest(),
    }
    status = EXIT_OK
    try:
        result = run_training(train, valid, params, tc, ds.vocab.output)
    except TrainingDiverged as exc:
        log.error("%s", exc)
        result, status = exc.result, EXIT_NUMERIC
        manifest["diverged"] = str(exc)
    meta = {
        "schedule": tc.schedule,
        "seed": tc.seed,
        "best_epoch": result.best_epoch,
        "best_score": result.best_score,
    }
    save_checkpoint(result.best, out / "best.npz", meta)
    if status == EXIT_OK:
        save_checkpoint(result.final, out / "final.npz", meta)
    _write_text(out / "telemetry.csv", telemetry_csv(result.telemetry))
    write_decisions(result.decisions, out / "decisions.jsonl")
    manifest.update(
        best_epoch=result.best_epoch,
        best_score=result.best_score,
        final_digest=result.final.digest(),
        best_digest=result.best.digest(),
        history=[h.__dict__ for h in result.history],
    )
    _write_text(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(
        f"trained {tc.schedule} seed {tc.seed}: "
        f"best composite {result.best_score} at epoch {result.best_epoch}"
    )
    return status


def _conditions(conf) -> list[str]:
    conds = conf["condition"]
    if isinstance(conds, str):
        conds = [conds]
    return list(CONDITIONS) if "all" in conds else list(dict.fromkeys(conds))


def cmd_eval(conf: dict) -> int:
    if conf.get("predictions"):
        recs = load_predictions(conf["predictions"])
        reports = [evaluate_corpus(((p, g) for _, p, g in recs), _conditions(conf)[0])]
    else:
        if not conf.get("checkpoint") or not conf.get("data"):
            raise UsageError("eval needs --checkpoint and --data (or --predictions)")
        params, _ = load_checkpoint(conf["checkpoint"])
        ds = load_dataset(conf["data"])
        samples = ds.split(conf["split"])[: conf["limit"]] if conf["limit"] else ds.split(conf["split"])
        if not samples:
            raise DataError(f"split {conf['split']!r} is empty")
        dc = DecodeConfig(conf["strategy"], conf["beam"], conf["temperature"], conf["seed"])
        reports = [
            evaluate_model(params, samples, ds.vocab.output, c, dc, conf["repeats"])
            for c in _conditions(conf)
        ]
    print(report_text(reports))
    if conf.get("out"):
        _write_text(Path(conf["out"]), report_csv(reports))
    return EXIT_OK


def cmd_analyze(conf: dict) -> int:
    if conf["what"] == "appendixC-curves":
        if not conf.get("decisions"):
            raise UsageError("appendixC-curves needs --decisions")
        text = rederive_telemetry(conf["decisions"])
        if conf.get("out"):
            _write_text(Path(conf["out"]), text)
        else:
            sys.stdout.write(text)
        if conf.get("telemetry"):
            ref = Path(conf["telemetry"]).read_text()
            if ref != text:
                print("telemetry mismatch: rederived table differs from training-time CSV", file=sys.stderr)
                return EXIT_DATA
            print("telemetry match", file=sys.stderr)
        return EXIT_OK
    if not conf.get("checkpoint") or not conf.get("data"):
        raise UsageError("fig3-correlation needs --checkpoint and --data")
    params, _ = load_checkpoint(conf["checkpoint"])
    ds = load_dataset(conf["data"])
    samples = ds.split(conf["split"])[: conf["n_samples"]]
    if not samples:
        raise DataError(f"split {conf['split']!r} is empty")
    res = similarity_vs_perplexity(params, samples)
    if conf.get("out"):
        _write_text(Path(conf["out"]), res.csv())
    print(json.dumps(res.summary()))
    return EXIT_OK


def cmd_show_mask(conf: dict) -> int:
    mask = build_stride_mask(_parse_dims(conf["shape"]), conf["gamma"], conf["convention"])
    print(mask.render())
    print(f"retained {mask.popcount}/{mask.bits.size} = {retention_ratio(mask):.6g}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "show-mask": cmd_show_mask,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        conf = effective_config(args.command, args)
        return COMMANDS[args.command](conf)
    except (UsageError, ConfigError, MaskError, TypeError) as exc:
        print(f"aimkp: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, AnalysisError, MetricError, EmptySplitError, OSError) as exc:
        print(f"aimkp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"aimkp: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TrainingError, ValueError) as exc:
        print(f"aimkp: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
