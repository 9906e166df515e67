"""Command line interface: synth -> train -> eval -> report pipeline."""

from __future__ import annotations

import numpy as np
import pytest

from modalseg.cli import main
from modalseg.data import read_dataset

CONFIG_INI = """\
[model]
stage_channels = 4, 6, 8, 10
blocks_per_stage = 1
d_embed = 8

[train]
epochs = 1
batch_size = 2
base_lr = 0.001
seed = 1
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synth+train run shared by the downstream command tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run("synth", "--seed", 5, "--out", data, "--train", 4, "--eval", 2,
               "--size", 32, "--classes", 3) == 0
    (root / "train.ini").write_text(CONFIG_INI)
    assert run("train", "--config", root / "train.ini",
               "--data", data / "train.mmss", "--out", root / "run") == 0
    return root


def test_synth_writes_both_splits(workspace):
    train = read_dataset(workspace / "data" / "train.mmss")
    eval_ = read_dataset(workspace / "data" / "eval.mmss")
    assert len(train.scenes) == 4
    assert len(eval_.scenes) == 2
    assert train.num_classes == 3
    assert train.scenes[0].labels.shape == (32, 32)
    # the splits come from different seeds
    train_seeds = {s.seed for s in train.scenes}
    assert all(s.seed not in train_seeds for s in eval_.scenes)


def test_train_writes_run_artifacts(workspace):
    assert (workspace / "run" / "model.mmck").exists()
    log = (workspace / "run" / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,l_m,l_c,loss,lr"
    assert len(log) == 2  # one epoch


def test_eval_writes_report_sidecar_and_rankings(workspace, capsys):
    report = workspace / "report.md"
    rankings = workspace / "rankings.csv"
    assert run("eval", "--model", workspace / "run" / "model.mmck",
               "--data", workspace / "data" / "eval.mmss",
               "--report", report, "--dump-rankings", rankings) == 0
    out = capsys.readouterr().out
    assert "mean mIoU over 15 subsets" in out

    table = report.read_text().splitlines()
    assert len([c for c in table[0].split("|") if c.strip()]) == 16
    assert (workspace / "report.md.json").exists()
    lines = rankings.read_text().splitlines()
    assert lines[0] == "sample,scale,modality,cosine,robust,fragile"
    assert len(lines) == 1 + 2 * 4 * 4


def test_report_rerenders_sidecar_as_csv(workspace, capsys):
    out_csv = workspace / "report.csv"
    assert run("report", "--report-json", workspace / "report.md.json",
               "--format", "csv", "--out", out_csv) == 0
    capsys.readouterr()
    header, row = out_csv.read_text().strip().splitlines()
    assert header.split(",")[-1] == "Mean"
    values = [float(v) for v in row.split(",")]
    assert len(values) == 16
    assert all(0.0 <= v <= 100.0 for v in values)


def test_missing_data_file_is_clean_error(tmp_path, capsys):
    assert run("train", "--data", tmp_path / "nope.mmss",
               "--out", tmp_path / "run") == 1
    assert capsys.readouterr().err.startswith("error:")


def test_bad_config_is_clean_error(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nlearning_rate = 1\n")
    assert run("train", "--config", cfg, "--data", tmp_path / "x.mmss",
               "--out", tmp_path / "run") == 1
    err = capsys.readouterr().err
    assert "learning_rate" in err


def test_unknown_subcommand_exits_nonzero(capsys):
    with pytest.raises(SystemExit) as info:
        run("frobnicate")
    assert info.value.code != 0
    capsys.readouterr()


def test_synth_rejects_bad_size(tmp_path, capsys):
    assert run("synth", "--out", tmp_path, "--train", 1, "--eval", 1,
               "--size", 48) == 1
    assert "error:" in capsys.readouterr().err
