import json

import pytest

from cpnet.cli import SENTINEL, UsageError, cli, load_model, parse_cli
from cpnet.config import ConfigError

SYNTH = "length=240\nn_vars=2\ncomponents=12:1.0\nnoise_std=0.05\nseed=3\nname=toy\n"
SMALL = ["--lookback", "16", "--horizon", "8", "--branches", "4:2", "--hidden", "8",
         "--max-epochs", "2", "--patience", "2", "--batch-size", "16"]


@pytest.fixture()
def synth_file(tmp_path):
    path = tmp_path / "toy.synth"
    path.write_text(SYNTH)
    return path


def test_precedence_defaults_config_flags(tmp_path, synth_file):
    conf = tmp_path / "run.conf"
    conf.write_text(f"synth={synth_file}\nseed=3\nlr=0.01\n")
    spec = parse_cli(["train", "--config", str(conf), "--seed", "7"])
    assert spec["seed"] == 7
    assert spec["lr"] == 0.01
    assert spec["hidden"] == 256


def test_underscore_and_dash_flags(synth_file):
    a = parse_cli(["train", "--synth", str(synth_file), "--batch-size", "4"])
    b = parse_cli(["train", "--synth", str(synth_file), "--batch_size", "4"])
    assert a["batch_size"] == b["batch_size"] == 4


def test_missing_dataset_is_usage_error(capsys):
    with pytest.raises(UsageError):
        parse_cli(["train"])
    assert cli(["train"]) == 2
    assert "no dataset" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, synth_file):
    conf = tmp_path / "bad.conf"
    conf.write_text(f"synth={synth_file}\nlearning_rate=0.1\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        parse_cli(["train", "--config", str(conf)])
    assert cli(["train", "--config", str(conf)]) == 2


def test_bad_values_rejected(synth_file):
    assert cli(["train", "--synth", str(synth_file), "--bogus", "1"]) == 2
    assert cli(["train", "--synth", str(synth_file), "--lr", "fast"]) == 2
    assert cli(["ablate", "--synth", str(synth_file), "--variants", "full,nope"]) == 2
    assert cli(["train", "--synth", str(synth_file), "--dilated-kernel", "4"]) == 2


def test_train_outputs_and_sentinel(tmp_path, synth_file):
    out = tmp_path / "run"
    assert cli(["train", "--synth", str(synth_file), "--output", str(out), *SMALL]) == 0
    for name in ("report.json", "epochs.csv", "timings.json", "model.cpnt", "model.arch", "resolved.conf"):
        assert (out / name).exists(), name
    assert not (out / SENTINEL).exists()
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["train"]["max_epochs"] == 2
    assert load_model(out / "model.cpnt").config.lookback == 16


def test_failed_run_leaves_sentinel(tmp_path):
    out = tmp_path / "run"
    csv = tmp_path / "short.csv"
    csv.write_text("date,a\n" + "".join(f"t{i},{i}\n" for i in range(20)))
    assert cli(["train", "--dataset", str(csv), "--output", str(out), *SMALL]) == 1
    assert (out / SENTINEL).exists()


def test_rerun_is_byte_identical(tmp_path, synth_file):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert cli(["train", "--synth", str(synth_file), "--output", str(out), *SMALL]) == 0
    for name in ("report.json", "epochs.csv", "model.cpnt", "model.arch"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_resolved_conf_reproduces_run(tmp_path, synth_file):
    first = tmp_path / "first"
    assert cli(["train", "--synth", str(synth_file), "--output", str(first), "--seed", "11", *SMALL]) == 0
    second = tmp_path / "second"
    assert cli(["train", "--config", str(first / "resolved.conf"), "--output", str(second)]) == 0
    assert (first / "report.json").read_bytes() == (second / "report.json").read_bytes()


def test_eval_matches_train_report(tmp_path, synth_file):
    out = tmp_path / "run"
    assert cli(["train", "--synth", str(synth_file), "--output", str(out), *SMALL]) == 0
    ev = tmp_path / "ev"
    assert cli(["eval", "--synth", str(synth_file), "--checkpoint", str(out / "model.cpnt"),
                "--output", str(ev)]) == 0
    report = json.loads((out / "report.json").read_text())
    metrics = json.loads((ev / "eval.json").read_text())
    assert metrics["mse"] == report["test"]["mse"]


def test_ablate_two_variants(tmp_path, synth_file):
    out = tmp_path / "abl"
    assert cli(["ablate", "--synth", str(synth_file), "--variants", "full,no_tp_cs",
                "--output", str(out), *SMALL]) == 0
    rows = json.loads((out / "ablation.json").read_text())["rows"]
    assert [r["variant"] for r in rows] == ["full", "no_tp_cs"]
    assert (out / "ablation.csv").read_text().startswith("variant,")


def test_synth_and_bench_commands(tmp_path, synth_file):
    assert cli(["synth", "--synth", str(synth_file), "--output", str(tmp_path)]) == 0
    assert (tmp_path / "toy.csv").read_text().startswith("date,")
    out = tmp_path / "bench"
    assert cli(["bench", "--bench-lookbacks", "16,32", "--bench-steps", "2", "--bench-vars", "1",
                "--batch-size", "2", "--horizon", "8", "--branches", "4:2", "--hidden", "8",
                "--output", str(out)]) == 0
    bench = json.loads((out / "bench.json").read_text())
    assert [r["lookback"] for r in bench["rows"]] == [16, 32]
