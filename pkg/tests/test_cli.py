import csv
import json
import os
import signal
import subprocess
import sys
import time

import pytest

from trojan_pipeline import cli
from trojan_pipeline.evaluation import parse_csv
from trojan_pipeline.model_zoo import save_model

REQUIRED_FLAGS = ("--config", "--seed", "--nodes", "--attacks", "--layers", "--trigger", "--transport", "--out")


def _error(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


@pytest.fixture(scope="module")
def weights(synth_trained, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "lenet.tpw"
    save_model(synth_trained[0], path)
    return path


def _synthetic(*extra):
    return ["--data", "synthetic", "--test-size", "40", *extra]


# ---------------------------------------------------------------------------
# help and usage
# ---------------------------------------------------------------------------

def test_help_lists_every_flag(capsys):
    texts = []
    for command in ("run", "sweep"):
        with pytest.raises(SystemExit) as exc:
            cli.main([command, "--help"])
        assert exc.value.code == 0
        texts.append(capsys.readouterr().out)
    for text in texts:
        for flag in REQUIRED_FLAGS + ("--weights", "--data", "--timeout", "--granularity", "--random-scale"):
            assert flag in text, flag
    parser = cli.build_parser()
    for action in parser._subparsers._group_actions[0].choices["sweep"]._actions:
        for option in action.option_strings:
            assert option in texts[1]


def test_usage_error_is_json(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["sweep", "--nodes"])
    assert exc.value.code == cli.EXIT_USAGE
    assert _error(capsys)["error"] == "usage"
    with pytest.raises(SystemExit):
        cli.main(["explode"])
    assert _error(capsys)["exit_code"] == 2


# ---------------------------------------------------------------------------
# workflow
# ---------------------------------------------------------------------------

def test_train_then_sweep_offline(tmp_path, capsys):
    out = tmp_path / "run"
    code = cli.main(["train", *_synthetic("--train-size", "300", "--epochs", "1", "--out", str(out))])
    assert code == 0
    log = json.loads((out / "train_log.json").read_text())
    assert log["data"] == "synthetic" and len(log["epoch_losses"]) == 1
    code = cli.main(["sweep", *_synthetic("--weights", str(out / "lenet.tpw"), "--attacks", "flip,swap",
                                          "--layers", "Conv2,FC2", "--out", str(out))])
    assert code == 0
    reports = sorted(out.glob("report_lenet_*.csv"))
    assert len(reports) == 1 and reports[0].with_suffix(".md").exists()
    report = parse_csv(reports[0].read_text(encoding="utf-8"))
    assert report.layers == ["Conv2", "FC2"]
    assert report.accuracy_columns == ["clean", "Flip", "Swap"]
    assert report.timing_columns == ["Flip", "Swap"]
    assert "| Conv2 |" in capsys.readouterr().out


def test_filtered_sweep_matches_full(tmp_path, weights):
    full_dir, one_dir = tmp_path / "full", tmp_path / "one"
    assert cli.main(["sweep", *_synthetic("--weights", str(weights), "--out", str(full_dir))]) == 0
    assert cli.main(["sweep", *_synthetic("--weights", str(weights), "--attacks", "flip",
                                          "--layers", "FC2", "--out", str(one_dir))]) == 0
    full = parse_csv(next(full_dir.glob("*.csv")).read_text(encoding="utf-8"))
    one = parse_csv(next(one_dir.glob("*.csv")).read_text(encoding="utf-8"))
    assert one.layers == ["FC2"] and one.accuracy_columns == ["clean", "Flip"]
    assert one.cell("FC2", "Flip") == full.cell("FC2", "Flip")
    assert one.cell("FC2", "clean") == full.cell("FC2", "clean")


def test_partition_two_nodes(capsys, tmp_path):
    assert cli.main(["partition", "--nodes", "2", "--out", str(tmp_path / "plan.json")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("Node 1 [trusted] layers 0..")
    assert lines[0].split(": ")[1].startswith("Conv1, ReLU1, Pool1")
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert [n["range"][0] for n in plan["nodes"]] == [0, plan["nodes"][0]["range"][1] + 1]


def test_run_writes_predictions(tmp_path, weights, capsys):
    code = cli.main(["run", *_synthetic("--weights", str(weights), "--transport", "tcp", "--limit", "12",
                                        "--attacks", "scalar:1.2", "--layers", "Conv2",
                                        "--trigger", "periodic:2:0", "--out", str(tmp_path))])
    assert code == 0
    with open(tmp_path / "predictions.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["inference_id"]) for r in rows] == list(range(12))
    assert all(r["ok"] == "1" for r in rows)
    assert "accuracy" in capsys.readouterr().out


def test_config_document(tmp_path, weights):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(
        f"weights: {weights}\n"
        "data: synthetic\n"
        "test_size: 20\n"
        "attacks: [mean]\n"
        "layers: [Conv1]\n"
        "random_scale: [0.4, 0.1]\n"
        "nodes:\n"
        "  - {trusted: true}\n"
        "  - {compute_weight: 2.0}\n"
        "  - {trusted: true, memory_limit_bytes: 1000000}\n"
        f"out: {tmp_path / 'out'}\n"
    )
    assert cli.main(["sweep", "--config", str(cfg)]) == 0
    report = parse_csv(next((tmp_path / "out").glob("*.csv")).read_text(encoding="utf-8"))
    assert report.layers == ["Conv1"]
    assert report.metadata["random_scale_mean_std"] == [0.4, 0.1]
    assert report.metadata["nodes"][1]["compute_weight"] == 2.0


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text("seed: 5\nnodes: 4\n")
    args = cli.build_parser().parse_args(["partition", "--config", str(cfg), "--nodes", "2"])
    resolved = cli.resolve_config(args)
    assert resolved["seed"] == 5 and len(resolved["nodes"]) == 2


def test_report_merge(tmp_path, weights, capsys):
    for layer in ("Conv1", "FC1"):
        assert cli.main(["sweep", *_synthetic("--weights", str(weights), "--attacks", "flip",
                                              "--layers", layer, "--out", str(tmp_path / layer))]) == 0
    paths = [str(next((tmp_path / layer).glob("*.csv"))) for layer in ("Conv1", "FC1")]
    capsys.readouterr()
    assert cli.main(["report", *paths]) == 0
    md = capsys.readouterr().out
    assert "| Conv1 |" in md and "| FC1 |" in md
    assert cli.main(["report", *paths, "--format", "csv", "--out", str(tmp_path / "merged.csv")]) == 0
    merged = parse_csv((tmp_path / "merged.csv").read_text(encoding="utf-8"))
    assert merged.layers == ["Conv1", "FC1"]


# ---------------------------------------------------------------------------
# error exit codes
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("argv,code,kind", [
    (["sweep", "--data", "synthetic", "--weights", "/nonexistent/w.tpw"], 4, "missing_file"),
    (["run", "--data", "synthetic"], 3, "invalid_config"),
    (["sweep", "--data", "synthetic", "--config", "/nonexistent.yaml"], 4, "missing_file"),
    (["sweep", "--attacks", "melt", "--data", "synthetic"], 3, "invalid_config"),
    (["sweep", "--trigger", "sometimes"], 3, "invalid_config"),
    (["sweep", "--nodes", "0"], 3, "invalid_config"),
    (["run", "--random-scale", "1.5,0.1"], 3, "invalid_config"),
    (["train", "--data", "/nonexistent/mnist"], 4, "missing_file"),
    (["report", "/nonexistent.csv"], 4, "missing_file"),
])
def test_error_exit_codes(argv, code, kind, capsys):
    assert cli.main(argv) == code
    err = _error(capsys)
    assert (err["exit_code"], err["error"]) == (code, kind)
    assert err["message"]


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("seed: 1\nnodez: 3\n")
    assert cli.main(["partition", "--config", str(cfg)]) == cli.EXIT_CONFIG
    assert "nodez" in _error(capsys)["message"]


def test_infeasible_partition(tmp_path, capsys):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text("nodes:\n  - {memory_limit_bytes: 100}\n  - {memory_limit_bytes: 100}\n")
    assert cli.main(["partition", "--config", str(cfg)]) == cli.EXIT_PARTITION
    assert _error(capsys)["error"] == "infeasible_partition"


def test_corrupt_weights_and_data(tmp_path, capsys):
    bad = tmp_path / "bad.tpw"
    bad.write_bytes(b"garbage")
    assert cli.main(["sweep", "--data", "synthetic", "--weights", str(bad)]) == cli.EXIT_DATA
    assert _error(capsys)["error"] == "bad_model_file"
    mnist = tmp_path / "mnist"
    mnist.mkdir()
    for stem in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                 "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"):
        (mnist / stem).write_bytes(b"\x00\x00\x08\x03")
    assert cli.main(["train", "--data", str(mnist)]) == cli.EXIT_DATA


def test_attack_on_trusted_node_is_runtime_error(weights, tmp_path, capsys):
    code = cli.main(["run", *_synthetic("--weights", str(weights), "--attacks", "flip", "--layers", "FC2",
                                        "--out", str(tmp_path))])
    assert code == cli.EXIT_RUNTIME
    assert "trusted" in _error(capsys)["message"]


def test_sigint_drains_and_exits_130(weights, tmp_path):
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    proc = subprocess.Popen(
        [sys.executable, "-m", "trojan_pipeline.cli", "run", "--data", "synthetic", "--test-size", "20000",
         "--weights", str(weights), "--out", str(tmp_path)],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, env=env, text=True)
    time.sleep(4.0)
    assert proc.poll() is None, proc.communicate()
    proc.send_signal(signal.SIGINT)
    out, err = proc.communicate(timeout=60)
    assert proc.returncode == cli.EXIT_INTERRUPTED, err
    assert "draining" in err
    with open(tmp_path / "predictions.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert 0 < len(rows) < 20000
    assert all(r["ok"] == "1" for r in rows)
