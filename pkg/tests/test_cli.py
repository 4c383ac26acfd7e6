import json
import subprocess
import sys

import pytest

from gather_excite.cli import EXIT_CONFIG, EXIT_OK, build_parser, main
from gather_excite.config import load_config

CONFIG = """\
name = "tiny"
seed = 1
output_dir = "{out}"

[arch]
family = "cifar-resnet"
depth = 8
width_divisor = 4

[placement]
ge = "theta:global:all"

[data]
path = "{data}"
subset = 64
eval_subset = 40

[train]
epochs = 2
batch_size = 16
lr = 0.05
"""


@pytest.fixture
def config(tmp_path, synth_root):
    path = tmp_path / "tiny.toml"
    path.write_text(CONFIG.format(out=tmp_path / "runs", data=synth_root))
    return path


@pytest.fixture
def trained(config, capsys):
    assert main(["train", str(config)]) == EXIT_OK
    capsys.readouterr()
    return config, config.parent / "runs" / "tiny"


def test_count_text(capsys):
    assert main(["count", "--arch", "resnet50", "--totals-only"]) == EXIT_OK
    assert "25.56M" in capsys.readouterr().out


def test_count_json_with_ge(capsys):
    assert main(["count", "--arch", "resnet50", "--ge", "theta:global:all", "--json"]) == EXIT_OK
    totals = json.loads(capsys.readouterr().out)["totals"]
    assert abs(totals["params"] / 1e6 - 31.2) <= 0.2


def test_count_parameter_free(capsys):
    main(["count", "--arch", "resnet50", "--json"])
    base = json.loads(capsys.readouterr().out)["totals"]
    main(["count", "--arch", "resnet50", "--ge", "theta-minus:global:all", "--json"])
    assert json.loads(capsys.readouterr().out)["totals"] == base


@pytest.mark.parametrize("argv", [
    ["count", "--arch", "resnet50", "--ge", "theta:e3:all"],
    ["count", "--arch", "vgg16"],
    ["count", "--arch", "resnet50", "--bogus"],
    ["gradcheck", "--op", "no_such_op"],
])
def test_config_errors_exit_2(argv, capsys):
    try:
        code = main(argv)
    except SystemExit as exc:  # argparse rejects unknown flags itself
        code = exc.code
    assert code == EXIT_CONFIG


def test_unknown_config_key_rejected(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text('name = "x"\n[arch]\nfamily = "cifar-resnet"\ndepth = 8\n[train]\nepochs = 1\nlearning_rate = 0.1\n')
    assert main(["train", str(path)]) == EXIT_CONFIG
    assert "learning_rate" in capsys.readouterr().err


def test_missing_dataset_exit_2(tmp_path, capsys):
    path = tmp_path / "c.toml"
    path.write_text(CONFIG.format(out=tmp_path / "runs", data=tmp_path / "nowhere"))
    assert main(["train", str(path)]) == EXIT_CONFIG


def test_relative_data_path_resolves_against_config(tmp_path, synth_root):
    path = tmp_path / "c.toml"
    path.write_text(CONFIG.format(out=tmp_path, data="data"))
    assert str(load_config(path).data.path) == str(tmp_path / "data")


def test_train_writes_run_layout(trained):
    _, run = trained
    lines = (run / "metrics.csv").read_text().splitlines()
    assert len(lines) == 3  # header + 2 epochs
    echo = json.loads((run / "config.json").read_text())
    assert echo["placement"]["ge"] == "theta:global:all" and echo["seed"] == 1
    assert (run / "checkpoints" / "last.gekt").exists()


def test_eval_and_missing_checkpoint(trained, tmp_path, capsys):
    config, run = trained
    assert main(["eval", str(config)]) == EXIT_OK
    out = json.loads((run / "analysis" / "eval.json").read_text())
    assert out["samples"] == 40 and 0 <= out["top5_error"] <= out["top1_error"] <= 1
    assert main(["eval", str(config), "--checkpoint", str(tmp_path / "none.gekt")]) == EXIT_CONFIG


def test_prune_both_orders_22_points(trained):
    config, run = trained
    assert main(["prune", str(config), "--block", "conv4-1", "--orders", "both"]) == EXIT_OK
    lines = (run / "analysis" / "prune_conv4-1.csv").read_text().splitlines()
    assert lines[0] == "ratio,order,top1" and len(lines) == 23


def test_selectivity_writes_csv(trained):
    config, run = trained
    assert main(["selectivity", str(config), "--layer", "conv3-1-relu", "--layer", "stage4.block1"]) == EXIT_OK
    assert (run / "analysis" / "selectivity_conv3-1.csv").exists()
    assert (run / "analysis" / "selectivity_conv4-1.csv").exists()


def test_resume_flag(trained, capsys):
    config, run = trained
    ckpt = run / "checkpoints" / "epoch_002.gekt"
    assert main(["train", str(config), "--epochs", "3", "--resume", str(ckpt)]) == EXIT_OK
    assert len((run / "metrics.csv").read_text().splitlines()) == 4


def test_gradcheck_ops_pass(capsys):
    assert main(["gradcheck", "--op", "relu,sigmoid,conv2d"]) == EXIT_OK
    assert "3/3 passed" in capsys.readouterr().out


def test_gradcheck_model(capsys):
    assert main(["gradcheck", "--model", "resnet8", "--ge", "theta-plus:e2:all", "--max-coords", "8"]) == EXIT_OK


def test_synth_data(tmp_path, capsys):
    assert main(["synth-data", str(tmp_path / "d"), "--train", "12", "--test", "4"]) == EXIT_OK
    assert (tmp_path / "d" / "test_batch.bin").stat().st_size == 4 * 3073


def test_help_lists_all_flags():
    text = build_parser().format_help()
    for cmd in ("count", "train", "eval", "gradcheck", "selectivity", "prune", "synth-data"):
        assert cmd in text
    sub = subprocess.run([sys.executable, "-m", "gather_excite", "prune", "--help"],
                         capture_output=True, text=True)
    assert sub.returncode == 0
    for flag in ("--block", "--orders", "--checkpoint"):
        assert flag in sub.stdout


def test_unknown_flag_fails_fast():
    sub = subprocess.run([sys.executable, "-m", "gather_excite", "count", "--arch", "resnet50", "--nope"],
                         capture_output=True, text=True)
    assert sub.returncode == 2 and "--nope" in sub.stderr
