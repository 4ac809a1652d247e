import json
import os

import pytest

import core
from ftkd.lib.algorithm.ftjnf import FTJNF, ModelConfig
from ftkd.train.process.extract_model import save_model


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for name in list(os.environ):
        if name.startswith("FTKD_"):
            monkeypatch.delenv(name)


def tiny_run(out_dir):
    return [
        "--synthetic",
        "--seed", "3",
        "--out", str(out_dir),
        "--set", "data.num_train=2",
        "--set", "data.num_val=1",
        "--set", "scene.example_seconds=0.5",
        "--set", "eval.snr_grid=[0.0]",
        "--set", "eval.examples_per_snr=1",
        "--set", "eval.sizes=[\"I\"]",
        "--set", "eval.methods=[\"none\", \"tlstm\"]",
        "--set", "train.crop_seconds=0.25",
        "--set", "train.batch_size=2",
        "--set", "train.max_epochs=1",
    ]


def test_count_params_table(capsys):
    assert core.main(["count-params"]) == core.EXIT_OK
    out = capsys.readouterr().out
    row = next(line for line in out.splitlines() if line.startswith("E "))
    assert "44098" in row
    assert "44400" in row
    assert "-0.68%" in row
    labels = [line.split()[0] for line in out.splitlines() if line.strip()]
    assert [label for label in labels if len(label) == 1] == list("ABCDEFGHI")


def test_count_params_describes_a_container(tmp_path, capsys):
    path = save_model(FTJNF(ModelConfig.from_preset("G")), str(tmp_path / "g.pth"))
    assert core.main(["count-params", "--model", path]) == core.EXIT_OK
    assert "Parameters: 24738" in capsys.readouterr().out


def test_configuration_errors_exit_with_2(tmp_path):
    assert core.main(["count-params", "--set", "train.no_such_key=1"]) == core.EXIT_CONFIG
    assert core.main(["simulate", "--out", str(tmp_path)]) == core.EXIT_CONFIG
    with pytest.raises(SystemExit) as excinfo:
        core.main(["distill", "--preset", "Z"])
    assert excinfo.value.code == 2


def test_environment_overrides_flags(tmp_path, monkeypatch):
    monkeypatch.setenv("FTKD_TRAIN__OPTIMIZER", "SGD")
    assert core.main(["count-params"]) == core.EXIT_CONFIG


def test_runtime_errors_exit_with_1(tmp_path):
    assert core.main(["report", "--out", str(tmp_path)]) == core.EXIT_RUNTIME
    assert core.main(["distill", "--out", str(tmp_path), "--kd", "tlstm"]) == core.EXIT_RUNTIME


def test_distill_rejects_disabled_taps(tmp_path):
    args = ["distill", "--out", str(tmp_path), "--kd", "linear", "--set", "kd.enabled_taps=[\"mask\", \"z_t\"]"]
    assert core.main(args) == core.EXIT_CONFIG


def test_simulate_is_repeatable_and_skips_when_done(tmp_path):
    assert core.main(["simulate", *tiny_run(tmp_path / "a")]) == core.EXIT_OK
    assert core.main(["simulate", *tiny_run(tmp_path / "b")]) == core.EXIT_OK
    first = tmp_path / "a" / "dataset" / "train" / "train_00000_y.wav"
    second = tmp_path / "b" / "dataset" / "train" / "train_00000_y.wav"
    assert first.read_bytes() == second.read_bytes()

    stamp = os.path.getmtime(first)
    assert core.main(["simulate", *tiny_run(tmp_path / "a")]) == core.EXIT_OK
    assert os.path.getmtime(first) == stamp

    with open(tmp_path / "a" / "dataset" / "config.json") as f:
        stored = json.load(f)
    assert stored["seed"] == 3
    assert stored["synthetic"] is True


def test_full_pipeline(tmp_path):
    run = tiny_run(tmp_path)
    assert core.main(["simulate", *run]) == core.EXIT_OK
    assert core.main(["train-teacher", *run, "--preset", "H"]) == core.EXIT_OK
    assert os.path.isfile(tmp_path / "teacher" / "best.pth")

    assert core.main(["distill", *run, "--preset", "I", "--kd", "tlstm"]) == core.EXIT_OK
    assert core.main(["distill", *run, "--preset", "I", "--kd", "none"]) == core.EXIT_OK
    student_dir = tmp_path / "students" / "I_tlstm"
    for name in ("student.pth", "config.json", "stage1/metrics.jsonl", "stage2/best.pth"):
        assert os.path.isfile(student_dir / name), name
    assert os.path.isfile(tmp_path / "students" / "I_none" / "baseline" / "best.pth")

    assert core.main(["evaluate", *run]) == core.EXIT_OK
    eval_dir = tmp_path / "eval"
    for name in ("records_snr.jsonl", "records_size.jsonl", "summary.txt", "snr_sweep.svg", "size_sweep.svg"):
        assert os.path.isfile(eval_dir / name), name
    models = {json.loads(line)["model"] for line in (eval_dir / "records_snr.jsonl").read_text().splitlines()}
    assert models == {"noisy", "teacher", "I/none", "I/tlstm"}

    os.remove(eval_dir / "summary.txt")
    assert core.main(["report", *run]) == core.EXIT_OK
    assert os.path.isfile(eval_dir / "summary.txt")
