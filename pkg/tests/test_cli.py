import json

import pytest
import yaml

from semgraph_reloc.cli import main
from semgraph_reloc.config import RunConfig
from toys import toy_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")
    cfg = toy_config()
    cfg.data_root = str(ws / "data")
    cfg.output_dir = str(ws / "run")
    cfg.synth.n_worlds = 8
    cfg.synth.sequences = ["00", "02"]
    cfg.train.epochs = 1
    cfg.train.batch_size = 4
    cfg.save(ws / "toy.yaml")
    assert main(["synth", "--config", str(ws / "toy.yaml")]) == 0
    return ws


def _snapshot(path):
    return RunConfig.load(path / "resolved_config.yaml")


def test_synth_layout(workspace):
    data = workspace / "data"
    assert sorted(p.name for p in (data / "sequences").iterdir()) == ["00", "02"]
    assert (data / "poses" / "00.txt").exists() and (data / "pairs.tsv").exists()
    assert (data / "resolved_config.yaml").exists()


def test_train_then_eval(workspace, capsys):
    cfgfile = str(workspace / "toy.yaml")
    out = workspace / "run"
    assert main(["train", "--config", cfgfile, "--learning-rate", "0.002"]) == 0
    assert _snapshot(out).train.learning_rate == 0.002
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [0]
    assert (out / "model.ckpt").exists() and (out / "training_curve.png").exists()

    capsys.readouterr()
    assert main(["eval", "--config", cfgfile, "--checkpoint", str(out / "model.ckpt")]) == 0
    table = capsys.readouterr().out
    assert table.splitlines()[-1].startswith("this run")
    for name in ("f1_table.tsv", "sequences.tsv", "pr_curves.png"):
        assert (out / name).exists()


def test_eval_leave_one_out(workspace, capsys):
    out = workspace / "loo"
    assert main(["eval", "--config", str(workspace / "toy.yaml"), "--output-dir", str(out)]) == 0
    row = capsys.readouterr().out.splitlines()[-1].split("\t")
    assert row[0] == "this run (full)" and row[1] != "-" and row[2] != "-"
    assert _snapshot(out).output_dir == str(out)


def test_set_and_flag_precedence(workspace):
    out = workspace / "pairs_run"
    argv = ["pairs", "--config", str(workspace / "toy.yaml"), "--output-dir", str(out),
            "--set", "train.learning_rate=3e-4", "--set", "model.k=3", "--seed", "5"]
    assert main(argv) == 0
    snap = _snapshot(out)
    assert (snap.train.learning_rate, snap.model.k, snap.rng_seed) == (3e-4, 3, 5)
    assert (out / "pairs.tsv").exists()


def test_nodes(workspace):
    out = workspace / "nodes_run"
    argv = ["nodes", "--config", str(workspace / "toy.yaml"), "--output-dir", str(out),
            "--scene", "00:0", "--modality", "lidar"]
    assert main(argv) == 0
    recs = [json.loads(l) for l in (out / "nodes.jsonl").read_text().splitlines()]
    assert len(recs) == 1 and recs[0]["scene"] == ["00", 0]


def test_print_config(capsys):
    assert main(["--print-config"]) == 0
    assert yaml.safe_load(capsys.readouterr().out) == RunConfig().to_dict()


@pytest.mark.parametrize("argv", [["frobnicate"], [], ["train", "--epochs", "x"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and err.splitlines()[-1].startswith("error: usage: ")


def test_config_error_category(tmp_path, capsys):
    code = main(["train", "--data-root", str(tmp_path / "missing"), "--output-dir", str(tmp_path)])
    assert code == 3
    assert capsys.readouterr().err.splitlines()[-1].startswith("error: config: ")


def test_bad_override(tmp_path, capsys):
    assert main(["pairs", "--set", "model.nope=1", "--output-dir", str(tmp_path)]) == 3
    assert "model.nope" in capsys.readouterr().err


def test_missing_checkpoint(workspace, capsys):
    argv = ["eval", "--config", str(workspace / "toy.yaml"), "--output-dir", str(workspace / "x"),
            "--no-train"]
    assert main(argv) == 3
    assert capsys.readouterr().err.splitlines()[-1].startswith("error: config: ")
