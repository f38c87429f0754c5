#!/usr/bin/env python3
"""
Test script to verify the command-line workflow end to end on a tiny task
"""

import json

import pytest

from cli import load_hypotheses, main
from config import Config
from errors import ParseError
from training import load_checkpoint

TINY_TASK = {"seed": 1, "n_groups": 4, "group_size": 3, "feature_dim": 4, "noise": 0.1, "n_train": 12,
             "n_test": 6, "utt_len_min": 3, "utt_len_max": 5, "n_train_entities": 2, "n_test_entities": 3,
             "entity_len_min": 2, "entity_len_max": 3}

TINY_MODEL = {
    "name": "tiny",
    "dims": {"feature_dim": 4, "embed_dim": 3, "audio_hidden": 3, "decoder_dim": 4, "attention_dim": 3,
             "bias_attention_dim": 3},
    "encoder": {"kind": "recurrent", "embed_dim": 3, "hidden_dim": 4},
    "query_mode": "d_plus_y_plus_cx",
    "granularity": "fine",
    "fusion": {"method": "interpolation", "beta": 0.2},
    "optimizer": {"kind": "adam", "lr": 0.01, "epochs": 1, "batch_size": 4},
}


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "task.json").write_text(json.dumps(TINY_TASK), encoding="utf-8")
    (tmp_path / "model.json").write_text(json.dumps(TINY_MODEL), encoding="utf-8")
    assert main(["gen-data", "--config", str(tmp_path / "task.json"), "--out", str(tmp_path / "data")]) == 0
    return tmp_path


@pytest.fixture
def trained(workspace):
    checkpoint = workspace / "tiny.json"
    assert main(["train", "--config", str(workspace / "model.json"), "--data", str(workspace / "data"),
                 "--out", str(checkpoint)]) == 0
    return workspace, checkpoint


def test_version(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["--version"])
    assert excinfo.value.code == 0
    assert capsys.readouterr().out.strip() == "deepclas 0.3.0 (format version 1)"


def test_gen_data_is_byte_identical(workspace):
    again = workspace / "again"
    assert main(["gen-data", "--config", str(workspace / "task.json"), "--out", str(again)]) == 0
    for name in ("train.jsonl", "test.jsonl", "entities.txt", "vocab.txt", "summary.json"):
        assert (workspace / "data" / name).read_bytes() == (again / name).read_bytes()


def test_gen_data_overrides(workspace, capsys):
    out = workspace / "small"
    assert main(["gen-data", "--config", str(workspace / "task.json"), "--out", str(out),
                 "--set", "n_train=8", "--seed", "5"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["n_train"] == 8
    assert len((out / "train.jsonl").read_text(encoding="utf-8").splitlines()) == 8


def test_train_decode_eval(trained):
    workspace, checkpoint = trained
    document = json.loads(checkpoint.read_text(encoding="utf-8"))
    assert document["kind"] == "checkpoint" and document["version"] == 1
    assert len(document["loss_history"]) == 1

    data = workspace / "data"
    hyps = workspace / "hyp.jsonl"
    assert main(["decode", "--checkpoint", str(checkpoint), "--data", str(data / "test.jsonl"),
                 "--bias-list", str(data / "entities.txt"), "--beam", "2", "--trie", "on",
                 "--out", str(hyps), "--dump-attention", str(workspace / "maps")]) == 0
    records = [json.loads(line) for line in hyps.read_text(encoding="utf-8").splitlines()]
    assert [r["id"] for r in records] == [f"test-{i:05d}" for i in range(6)]
    assert set(records[0]) == {"id", "hypothesis", "log_prob"}
    attention = json.loads((workspace / "maps" / "test-00000.json").read_text(encoding="utf-8"))
    assert len(attention["alpha"]) == len(attention["tokens"])
    assert attention["bias_entries"][0] == "<no-bias>"

    report_path = workspace / "report.json"
    assert main(["eval", "--ref", str(data / "test.jsonl"), "--hyp", str(hyps),
                 "--bias-list", str(data / "entities.txt"), "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert report["N"] > 0
    assert list(report["buckets"]) == ["2-16", "2-4", "5-16"]
    assert report["N_t"] >= 3


def test_decode_without_bias_matches_empty_list(trained, capsys):
    workspace, checkpoint = trained
    data = workspace / "data"
    common = ["decode", "--checkpoint", str(checkpoint), "--data", str(data / "test.jsonl"), "--beam", "2"]
    assert main(common + ["--bias-list", str(data / "entities.txt"), "--bias", "off"]) == 0
    off = capsys.readouterr().out
    assert main(common + ["--fusion", "none"]) == 0
    assert capsys.readouterr().out == off


def test_dump_attention_single_utterance(trained):
    workspace, checkpoint = trained
    data = workspace / "data"
    out = workspace / "one.json"
    assert main(["dump-attention", "--checkpoint", str(checkpoint), "--data", str(data / "test.jsonl"),
                 "--bias-list", str(data / "entities.txt"), "--id", "test-00001", "--beam", "2",
                 "--out", str(out)]) == 0
    document = json.loads(out.read_text(encoding="utf-8"))
    assert document["id"] == "test-00001"
    assert all(abs(sum(row) - 1.0) < 1e-9 for row in document["alpha"])
    assert main(["dump-attention", "--checkpoint", str(checkpoint), "--data", str(data / "test.jsonl"),
                 "--id", "nope"]) == 1


def test_train_defaults_to_runs_dir(workspace, monkeypatch):
    monkeypatch.setattr(Config, "RUNS_DIR", str(workspace / "runs"))
    assert main(["train", "--config", str(workspace / "model.json"), "--data", str(workspace / "data")]) == 0
    checkpoint = load_checkpoint(workspace / "runs" / "tiny.json")
    assert checkpoint.config.name == "tiny" and checkpoint.step > 0


def test_ablate_writes_json_and_csv(workspace):
    base = {k: v for k, v in TINY_MODEL.items() if k != "name"}
    ladder = {"name": "tiny", "base": base, "rungs": [{"name": "E0", "bias_loss": False}],
              "decode": {"beam": 2}}
    (workspace / "ladder.json").write_text(json.dumps(ladder), encoding="utf-8")
    out = workspace / "table.json"
    assert main(["ablate", "--ladder", str(workspace / "ladder.json"), "--data", str(workspace / "data"),
                 "--out", str(out), "--set", "base.optimizer.epochs=1"]) == 0
    document = json.loads(out.read_text(encoding="utf-8"))
    assert document["kind"] == "ablation" and document["ladder"] == "tiny"
    # a fusion rung: one bias=N row plus one row per beta
    assert [row["bias"] for row in document["rows"]] == ["N", "Y", "Y", "Y"]
    csv_lines = (workspace / "table.csv").read_text(encoding="utf-8").splitlines()
    assert len(csv_lines) == 1 + 4
    assert csv_lines[0].startswith("rung,bias,fusion,beta,trie,cer")


def test_dump_trie(tmp_path, capsys):
    bias_list = tmp_path / "bias.txt"
    bias_list.write_text("张三\n王二\n王小五\n王小六\n", encoding="utf-8")
    assert main(["dump-trie", "--bias-list", str(bias_list)]) == 0
    assert capsys.readouterr().out == "张\n  三 *\n王\n  二 *\n  小\n    五 *\n    六 *\n"


def test_failures_exit_with_status_one(workspace):
    assert main(["train", "--config", str(workspace / "model.json"), "--data", str(workspace / "missing"),
                 "--out", str(workspace / "x.json")]) == 1
    assert main(["train", "--config", str(workspace / "model.json"), "--data", str(workspace / "data"),
                 "--set", "query_mode=sideways"]) == 1
    assert main(["decode", "--checkpoint", str(workspace / "task.json"),
                 "--data", str(workspace / "data" / "test.jsonl")]) == 1
    bad_list = workspace / "dup.txt"
    bad_list.write_text("张三\n张三\n", encoding="utf-8")
    assert main(["dump-trie", "--bias-list", str(bad_list)]) == 1


def test_load_hypotheses_reports_bad_lines(tmp_path):
    path = tmp_path / "hyp.jsonl"
    path.write_text('{"id": "a", "hypothesis": ["x"]}\n{"id": "b"}\n', encoding="utf-8")
    with pytest.raises(ParseError) as excinfo:
        load_hypotheses(str(path))
    assert excinfo.value.line_number == 2


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
