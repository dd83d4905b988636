"""End-to-end CLI flow: synth-data -> train -> evaluate/detect/retrieve."""

import json
from pathlib import Path

import pytest

from got.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth-data", "--out", str(data), "--n", "6", "--seed", "3"]) == 0
    return root


def run_train(workspace, task, out_name, extra=()):
    out = workspace / out_name
    code = main([
        "train", "--dataset", str(workspace / "data" / "annotations.jsonl"),
        "--out", str(out), "--seed", "1",
        "--set", "width_preset=toy", "--set", f"task={task}",
        "--set", "iterations=4", "--set", "min_count=1",
        "--set", "checkpoint_every=4", "--set", "learning_rate=0.005",
        *extra,
    ])
    assert code == 0
    ckpts = sorted(out.glob("*.zip"))
    assert ckpts
    return ckpts[-1]


@pytest.fixture(scope="module")
def caption_ckpt(workspace):
    return run_train(workspace, "caption", "cap_run")


@pytest.fixture(scope="module")
def retrieval_ckpt(workspace):
    return run_train(workspace, "retrieval", "ret_run")


def test_synth_data_layout(workspace):
    data = workspace / "data"
    assert (data / "annotations.jsonl").exists()
    assert (data / "superclasses.json").exists()
    assert (data / "splits.json").exists()
    assert len(list((data / "images").glob("*.png"))) == 6
    splits = json.loads((data / "splits.json").read_text())
    assert set(splits) == {"train", "val"}


def test_train_writes_checkpoints(caption_ckpt):
    assert caption_ckpt.name.startswith("checkpoint-")


def test_evaluate_writes_report(workspace, caption_ckpt, capsys):
    report_path = workspace / "report.json"
    code = main([
        "evaluate", "--dataset", str(workspace / "data" / "annotations.jsonl"),
        "--split", "val", "--checkpoint", str(caption_ckpt), "--out", str(report_path),
    ])
    assert code == 0
    printed = capsys.readouterr().out
    assert "Bleu_1" in printed and "CIDEr" in printed
    report = json.loads(report_path.read_text())
    assert set(report) >= {"Bleu_1", "Bleu_4", "ROUGE_L", "CIDEr", "METEOR", "corpus"}
    assert report["METEOR"] is None


def test_evaluate_retrieval_reports_r_at_1(workspace, retrieval_ckpt, capsys):
    code = main([
        "evaluate", "--dataset", str(workspace / "data" / "annotations.jsonl"),
        "--split", "val", "--checkpoint", str(retrieval_ckpt),
    ])
    assert code == 0
    out = capsys.readouterr().out
    assert "R@1" in out and "%" in out


def test_detect_subcommand(workspace, caption_ckpt, capsys):
    image = next((workspace / "data" / "images").glob("*.png"))
    code = main(["detect", "--image", str(image), "--checkpoint", str(caption_ckpt)])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert len(payload["detections"]) >= 1
    assert {"box", "superclass", "score", "caption"} <= set(payload["detections"][0])


def test_retrieve_subcommand(workspace, retrieval_ckpt, capsys):
    image = next((workspace / "data" / "images").glob("*.png"))
    code = main(["retrieve", "--image", str(image), "--query", "a red square",
                 "--checkpoint", str(retrieval_ckpt)])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["chosen"]["retrieval_score"] == max(
        c["retrieval_score"] for c in payload["candidates"])


def test_task_checkpoint_mismatch_is_validation_error(workspace, retrieval_ckpt, capsys):
    image = next((workspace / "data" / "images").glob("*.png"))
    code = main(["detect", "--image", str(image), "--checkpoint", str(retrieval_ckpt)])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_missing_dataset_is_validation_error(workspace, caption_ckpt, capsys):
    code = main(["evaluate", "--dataset", str(workspace / "nope.jsonl"),
                 "--checkpoint", str(caption_ckpt)])
    assert code == 2


def test_bad_split_is_validation_error(workspace, caption_ckpt):
    code = main(["evaluate", "--dataset", str(workspace / "data" / "annotations.jsonl"),
                 "--split", "zzz", "--checkpoint", str(caption_ckpt)])
    assert code == 2


def test_bad_set_flag_is_validation_error(workspace):
    code = main(["train", "--dataset", str(workspace / "data" / "annotations.jsonl"),
                 "--set", "nonsense"])
    assert code == 2


def test_unknown_config_key_is_validation_error(workspace):
    code = main(["train", "--dataset", str(workspace / "data" / "annotations.jsonl"),
                 "--set", "not_a_key=1"])
    assert code == 2


def test_corrupt_checkpoint_is_validation_error(workspace, caption_ckpt, capsys):
    bad = workspace / "bad.zip"
    bad.write_bytes(caption_ckpt.read_bytes()[:100])
    image = next((workspace / "data" / "images").glob("*.png"))
    assert main(["detect", "--image", str(image), "--checkpoint", str(bad)]) == 2


def test_config_file_plus_cli_override(workspace, tmp_path_factory):
    cfg_dir = tmp_path_factory.mktemp("cfg")
    cfg = cfg_dir / "train.cfg"
    cfg.write_text(
        "# toy run\n"
        "width_preset = toy\n"
        "task = caption\n"
        "iterations = 3\n"
        "min_count = 1\n"
        "learning_rate = 0.005\n"
    )
    out = cfg_dir / "run"
    code = main(["train", "--dataset", str(workspace / "data" / "annotations.jsonl"),
                 "--config", str(cfg), "--out", str(out),
                 "--set", "iterations=2", "--seed", "4"])
    assert code == 0
    from got.trainer import load_checkpoint

    ckpt = load_checkpoint(sorted(out.glob("*.zip"))[-1])
    assert ckpt.manifest["config"]["iterations"] == 2  # CLI overrides the file
    assert ckpt.manifest["config"]["seed"] == 4
    assert ckpt.manifest["iteration"] == 2
