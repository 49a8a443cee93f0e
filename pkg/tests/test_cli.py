import csv
import json

import pytest

from pmvad import cli
from pmvad.config import RunConfig, parse_pairs, resolve
from pmvad.errors import ConfigError

TINY = """\
preset = none
device_kind = oscillator
period_len = 8
num_cycles_train = 6
num_cycles_test = 12
frame_size = 16
t_max = 8
clip_len = 4
memory_slots = 16
channels = 8
epochs = 1
lr = 0.003
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), (json.loads(err) if err.strip() else None)


def test_resolve_order_and_round_trip(tmp_path):
    cfg = resolve(None, {"preset": "sorter-64"})
    assert (cfg.device_kind, cfg.period_len, cfg.t_max, cfg.epochs) == ("sorter", 24, 24, 6)
    path = tmp_path / "c.txt"
    path.write_text("preset = sorter-64\nepochs = 2\n")
    assert resolve(path, {"epochs": 3}).epochs == 3
    assert resolve(path).epochs == 2
    cfg.write(tmp_path)
    again = resolve(tmp_path / "config.txt")
    assert again == cfg


def test_resolved_config_lists_every_key():
    text = RunConfig().to_text()
    keys = [line.split(" = ")[0] for line in text.splitlines()]
    assert keys == list(RunConfig.__dataclass_fields__)


@pytest.mark.parametrize("line", ["epochz = 3", "epochs = three", "epochs", "use_memory = maybe"])
def test_bad_config_lines_rejected(line):
    with pytest.raises(ConfigError):
        parse_pairs([line], "t")


def test_unknown_preset_rejected():
    with pytest.raises(ConfigError):
        resolve(None, {"preset": "nope"})


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert "schema 1" in capsys.readouterr().out


def test_gen_train_eval_pipeline(tmp_path, tiny_cfg, capsys):
    code, out, _ = run(capsys, "gen", "--config", tiny_cfg, "--seed", 4, "--out", tmp_path / "g")
    assert code == 0 and out["datasets"] == [str(tmp_path / "g" / "custom-s4")]
    data = tmp_path / "g" / "custom-s4"
    assert (tmp_path / "g" / "config.txt").exists() and (data / "manifest.json").exists()

    code, out, _ = run(capsys, "train", "--config", tiny_cfg, "--data", data, "--out", tmp_path / "t")
    assert code == 0 and out["epochs"] == 1
    assert {p.name for p in (tmp_path / "t").iterdir()} == {"config.txt", "model.ckpt", "train_log.csv"}

    code, out, _ = run(capsys, "eval", "--config", tiny_cfg, "--data", data, "--model", tmp_path / "t" / "model.ckpt",
                       "--out", tmp_path / "e", "--dump-trace")
    assert code == 0 and 0 <= out["auc"] <= 1
    names = {p.name for p in (tmp_path / "e").iterdir()}
    assert names == {"config.txt", "report.json", "scores.csv", "memory_trace.csv"}


def test_refuses_non_empty_output(tmp_path, tiny_cfg, capsys):
    (tmp_path / "g").mkdir()
    (tmp_path / "g" / "keep.txt").write_text("x")
    code, _, err = run(capsys, "gen", "--config", tiny_cfg, "--out", tmp_path / "g")
    assert code != 0 and err["error"] == "config"
    assert (tmp_path / "g" / "keep.txt").read_text() == "x"


def test_structured_errors(tmp_path, tiny_cfg, capsys):
    code, _, err = run(capsys, "gen", "--set", "bogus=1", "--out", tmp_path / "a")
    assert code == 2 and "bogus" in err["message"]
    code, _, err = run(capsys, "train", "--config", tiny_cfg, "--data", tmp_path / "missing", "--out", tmp_path / "b")
    assert code == 1 and err["error"] == "dataset"


def test_twin_preset_writes_both_datasets(tmp_path, capsys):
    code, out, _ = run(capsys, "gen", "--preset", "shift-pair", "--seed", 0, "--set", "num_cycles_train=80",
                       "--out", tmp_path / "g")
    assert code == 0
    assert [p.rsplit("/", 1)[1] for p in out["datasets"]] == ["shift-pair-s0", "shift-pair-realish-s0"]


def test_ablate_and_finetune(tmp_path, tiny_cfg, capsys):
    run(capsys, "gen", "--config", tiny_cfg, "--out", tmp_path / "g")
    data = tmp_path / "g" / "custom-s0"
    code, out, _ = run(capsys, "ablate", "--config", tiny_cfg, "--data", data, "--family", "motion",
                       "--out", tmp_path / "ab")
    assert code == 0 and len(out["rows"]) == 4
    rows = list(csv.DictReader(open(tmp_path / "ab" / "ablation.csv")))
    assert len(rows) == 4 and all(0 <= float(r["auc"]) <= 1 for r in rows)
    assert len(out["lambda_sweep"]) == 5

    run(capsys, "train", "--config", tiny_cfg, "--data", data, "--out", tmp_path / "t")
    code, out, _ = run(capsys, "finetune", "--config", tiny_cfg, "--set", "finetune_steps=2", "--data", data,
                       "--pretrained", tmp_path / "t" / "model.ckpt", "--merge", "--out", tmp_path / "ft")
    assert code == 0
    assert [r["mode"] for r in out["rows"]] == ["pretrained", "full", "peft"]
    assert out["rows"][2]["trainable_params"] < out["rows"][1]["trainable_params"]
    assert {"adapter.ckpt", "merged.ckpt", "full.ckpt", "finetune.csv"} <= {p.name for p in (tmp_path / "ft").iterdir()}
