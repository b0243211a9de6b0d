import csv

import pytest

from dataset import Domain, InteractionEvent, load_split
from main import main
from manifest import read_manifest
from synthetic import write_events

TINY_MODEL = ["--set", "d=8", "--set", "n_heads=2", "--set", "enc_layers=1", "--set", "T=10",
              "--set", "epochs=2", "--set", "warmup_epochs=1", "--set", "batch_size=64",
              "--set", "n_negatives=5"]


@pytest.fixture
def run(tmp_path):
    log_file = str(tmp_path / "run.log")

    def _run(*argv):
        return main(["--log-file", log_file, *[str(a) for a in argv]])
    return _run


@pytest.fixture
def log_path(tmp_path):
    patterns = {"u1": "XY" * 6, "u2": "XYXYXYXYX", "u3": "XXXXXXXXXYY", "u4": "XXXYYYYYYY"}
    events = [InteractionEvent(user, f"{d.lower()}{k}", Domain(d), 100 * n + k)
              for n, (user, pattern) in enumerate(patterns.items()) for k, d in enumerate(pattern)]
    path = tmp_path / "log.csv"
    write_events(events, str(path))
    return path


def test_prepare_prints_statistics_and_writes_manifest(run, tmp_path, log_path, capsys):
    out = tmp_path / "split"
    assert run("prepare", "--input", log_path, "--out", out) == 0
    printed = capsys.readouterr().out
    assert "#Users" in printed and "Split written to" in printed
    split = load_split(str(out))
    assert split.user_ids == ["u1", "u4"]
    manifest = read_manifest(str(out))
    assert manifest.command == "prepare"
    assert manifest.outputs == ["test.tsv", "train.tsv", "valid.tsv", "vocab.tsv"]
    assert manifest.host["cpu_count"] >= 1


def test_prepare_thresholds_are_flags(run, tmp_path, log_path):
    out = tmp_path / "split"
    assert run("prepare", "--input", log_path, "--out", out,
               "--min-interactions", 1, "--min-per-domain", 1) == 0
    assert load_split(str(out)).user_ids == ["u1", "u2", "u3", "u4"]


def test_missing_input_is_reported(run, tmp_path, capsys):
    missing = tmp_path / "absent.csv"
    assert run("prepare", "--input", missing, "--out", tmp_path / "split") == 1
    assert str(missing) in capsys.readouterr().err


def test_unknown_config_key_fails_cleanly(run, tmp_path, capsys):
    assert run("synth", "--out", tmp_path / "s", "--set", "bogus=1") == 1
    assert "bogus" in capsys.readouterr().err


def test_synth_is_deterministic(run, tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--out", tmp_path / name, "--seed", 4, "--set", "n_users=30") == 0
    assert (tmp_path / "a" / "events.csv").read_bytes() == (tmp_path / "b" / "events.csv").read_bytes()
    assert read_manifest(str(tmp_path / "a")).seeds == [4]


def test_full_pipeline_is_reproducible(run, tmp_path):
    synth, data, train = tmp_path / "synth", tmp_path / "data", tmp_path / "train"
    assert run("synth", "--out", synth, "--set", "n_users=40", "--set", "n_items_x=30",
               "--set", "n_items_y=30") == 0
    assert run("prepare", "--input", synth / "events.csv", "--out", data) == 0
    assert run("train", "--data", data, "--out", train, *TINY_MODEL) == 0
    assert (train / "best" / "manifest.json").exists()
    assert (train / "checkpoints" / "epoch_0002").is_dir()

    cfg = train / "train.cfg"
    ckpt = train / "best"
    for name in ("eval_a", "eval_b"):
        assert run("eval", "--ckpt", ckpt, "--data", data, "--out", tmp_path / name, "--config", cfg) == 0
    metrics_a = (tmp_path / "eval_a" / "metrics.csv").read_bytes()
    assert metrics_a == (tmp_path / "eval_b" / "metrics.csv").read_bytes()
    with open(tmp_path / "eval_a" / "metrics.csv", "r", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["domain", "metric", "value", "value_x100", "n_users"]
    assert sum(int(r[4]) for r in rows[1:] if r[1] == "MRR") == 40

    assert run("robust", "--ckpt", ckpt, "--data", data, "--out", tmp_path / "robust",
               "--config", cfg, "--rates", "0,0.2") == 0
    with open(tmp_path / "robust" / "robustness.csv", "r", encoding="utf-8") as f:
        robust = list(csv.reader(f))
    assert ["0.00", "ALL", "retained_fraction", "1.000000"] in robust

    assert run("sweep", "--ckpt", ckpt, "--data", data, "--out", tmp_path / "sweep",
               "--config", cfg, "--steps", "1,5,10") == 0
    with open(tmp_path / "sweep" / "sweep.csv", "r", encoding="utf-8") as f:
        sweep = list(csv.reader(f))
    assert sorted({r[0] for r in sweep[1:]}, key=int) == ["1", "5", "10"]
    assert (tmp_path / "sweep" / "sweep.png").exists()

    assert run("sweep", "--ckpt", ckpt, "--data", data, "--out", tmp_path / "bad",
               "--config", cfg, "--steps", "11") == 1
