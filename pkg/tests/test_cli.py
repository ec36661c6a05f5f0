import csv
import json

import pytest

from aimkp.analysis import read_decisions
from aimkp.cli import main
from aimkp.metrics import EvalReport, mean_reports
from aimkp.model.checkpoint import load_checkpoint

SMALL = ["--embed-dim", "16", "--num-layers", "1", "--num-heads", "2", "--val-samples", "8"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "d"
    assert main(["gen-data", "--n", "120", "--seed", "4", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def run(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    argv = ["train", "--data", str(data), "--out", str(out), "--epochs", "2", "--seed", "1", *SMALL]
    assert main(argv + ["--tau-v", "0.4", "--tau-t", "0.1"]) == 0
    return out


def read_report(path):
    with open(path) as fh:
        return [
            EvalReport(r["condition"], float(r["f1_at_1"]), float(r["f1_at_3"]), float(r["map_at_5"]), int(r["n_samples"]))
            for r in csv.DictReader(fh)
        ]


def test_gen_data_files_and_determinism(data, tmp_path):
    names = sorted(p.name for p in data.iterdir())
    assert names == ["manifest.json", "test.jsonl", "train.jsonl", "valid.jsonl", "vocab.json"]
    again = tmp_path / "again"
    assert main(["gen-data", "--n", "120", "--seed", "4", "--out", str(again)]) == 0
    for name in names[1:]:
        assert (again / name).read_bytes() == (data / name).read_bytes()
    strip = lambda d: {**json.loads((d / "manifest.json").read_text()), "config": None}
    assert strip(again) == strip(data)


def test_invalid_spec_leaves_nothing(tmp_path, capsys):
    out = tmp_path / "bad"
    assert main(["gen-data", "--n", "0", "--out", str(out)]) != 0
    assert not out.exists()
    assert "error" in capsys.readouterr().err


def test_usage_errors_exit_one(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--schedule", "bogus"])
    assert exc.value.code == 1
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"), "--schedule", "fixed:3"]) == 1


def test_missing_data_exits_two(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_train_artifacts(run, data):
    names = {p.name for p in run.iterdir()}
    assert {"best.npz", "final.npz", "telemetry.csv", "decisions.jsonl", "manifest.json"} <= names
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 1 and manifest["train_config"]["tau_v"] == 0.4
    assert set(manifest["data_files"]) >= {"train.jsonl", "vocab.json"}
    params, meta = load_checkpoint(run / "final.npz")
    assert params.digest() == manifest["final_digest"] and meta["schedule"] == "aimkp"


def test_decision_log_replays_switch(run):
    rows = read_decisions(run / "decisions.jsonl")
    assert rows
    for r in rows:
        for m, tau in (("v", 0.4), ("t", 0.1)):
            s = r[f"s_{m}"]
            if s is not None:
                assert r[f"lambda_{m}"] == int(s >= tau)


def test_flags_override_config_file(data, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"n": 30, "seed": 9}))
    out = tmp_path / "g"
    assert main(["gen-data", "--config", str(conf), "--seed", "2", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["n"] == 30 and manifest["config"]["seed"] == 2
    conf.write_text(json.dumps({"nope": 1}))
    assert main(["gen-data", "--config", str(conf), "--out", str(tmp_path / "h")]) == 1


def test_greedy_eval_is_repeatable(run, data, tmp_path):
    base = ["eval", "--checkpoint", str(run / "best.npz"), "--data", str(data), "--condition", "all"]
    assert main(base + ["--out", str(tmp_path / "a.csv")]) == 0
    assert main(base + ["--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert [r.condition for r in read_report(tmp_path / "a.csv")] == ["multimodal", "text-only", "image-only"]


def test_repeats_average_chained_seeds(run, data, tmp_path):
    base = ["eval", "--checkpoint", str(run / "best.npz"), "--data", str(data), "--strategy", "beam-sample"]
    assert main(base + ["--repeats", "3", "--seed", "5", "--out", str(tmp_path / "r3.csv")]) == 0
    singles = []
    for seed in (5, 6, 7):
        path = tmp_path / f"s{seed}.csv"
        assert main(base + ["--seed", str(seed), "--out", str(path)]) == 0
        singles += read_report(path)
    assert read_report(tmp_path / "r3.csv") == [mean_reports(singles)]


def test_appendix_curves_match_training_csv(run, tmp_path, capsys):
    argv = ["analyze", "--what", "appendixC-curves", "--decisions", str(run / "decisions.jsonl")]
    assert main(argv + ["--telemetry", str(run / "telemetry.csv"), "--out", str(tmp_path / "t.csv")]) == 0
    assert (tmp_path / "t.csv").read_text() == (run / "telemetry.csv").read_text()
    tampered = tmp_path / "bad.csv"
    tampered.write_text((run / "telemetry.csv").read_text().replace("visual", "text", 1))
    assert main(argv + ["--telemetry", str(tampered)]) == 2


def test_fig3_analysis_runs(run, data, tmp_path, capsys):
    out = tmp_path / "fig3.csv"
    argv = ["analyze", "--what", "fig3-correlation", "--checkpoint", str(run / "best.npz"), "--data", str(data)]
    assert main(argv + ["--n-samples", "6", "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["n_variants"] == len(out.read_text().splitlines()) - 1 > 0


def test_show_mask(capsys):
    assert main(["show-mask", "--shape", "4x4", "--gamma", "2"]) == 0
    assert "retained 4/16" in capsys.readouterr().out
    assert main(["show-mask", "--shape", "4x4", "--gamma", "0"]) == 1
