import pytest

from ma2mi.main import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, build_parser, main, resolve_run
from ma2mi.utils import read_json, read_jsonl, write_json


def _report(confusion, config_hash):
    total = sum(map(sum, confusion))
    correct = sum(confusion[i][i] for i in range(len(confusion)))
    return {
        "protocol": "LOSO",
        "seed": 0,
        "config_hash": config_hash,
        "pretrained": None,
        "pooled_confusion": confusion,
        "accuracy": correct / total,
        "uf1": 0.5,
    }


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "pretrain" in capsys.readouterr().out


def test_usage_errors(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["train"]) == EXIT_USAGE
    assert main(["pretrain", "--config", str(tmp_path / "missing.json")]) == EXIT_USAGE
    assert main(["pretrain", "--set", "optim.learning_rate=0.1"]) == EXIT_USAGE
    assert main(["pretrain", "--set", "optim.lr=fast"]) == EXIT_USAGE


def test_synth_gen_is_reproducible(test_config_path, tmp_path):
    for name in ("a", "b"):
        args = ["synth-gen", "--config", str(test_config_path), "--seed", "7", "--out", str(tmp_path / name)]
        assert main(args) == EXIT_OK
    expected = resolve_run(build_parser().parse_args(args)).config_hash
    first = read_json(tmp_path / "a" / "corpus.json")
    second = read_json(tmp_path / "b" / "corpus.json")
    assert first["config"]["seed"] == 7
    assert first["checksums"] == second["checksums"]
    assert second["config_hash"] == expected


def test_pretrain_with_override(corpus_dir, test_config_path, tmp_path):
    out = tmp_path / "run"
    code = main([
        "pretrain", "--config", str(test_config_path),
        "--set", f"data.pretrain_manifest={corpus_dir / 'pretrain.jsonl'}",
        "--set", "optim.lr=0.0004",
        "--seed", "3", "--out", str(out), "--device", "cpu",
    ])
    assert code == EXIT_OK
    header = read_jsonl(out / "pretrain_log.jsonl")[0]
    assert header["event"] == "header"
    assert header["lr"] == pytest.approx(0.0004)
    assert header["seed"] == 3
    assert (out / "pretrain.pt").is_file()
    assert (out / "ma2mi.log").is_file()


def test_runtime_failure_exit_code(test_config_path, tmp_path):
    code = main([
        "finetune", "--config", str(test_config_path),
        "--set", f"data.finetune_manifest={tmp_path / 'missing.jsonl'}",
        "--out", str(tmp_path / "run"), "--device", "cpu",
    ])
    assert code == EXIT_FAILURE


def test_compare_writes_table(tmp_path, capsys):
    write_json(tmp_path / "a.json", _report([[2, 1], [1, 3]], "ha"))
    write_json(tmp_path / "b.json", _report([[3, 0], [1, 3]], "hb"))
    code = main([
        "compare",
        "--set", f"evaluate.report_a={tmp_path / 'a.json'}",
        "--set", f"evaluate.report_b={tmp_path / 'b.json'}",
        "--out", str(tmp_path / "cmp"),
    ])
    assert code == EXIT_OK
    assert "delta" in capsys.readouterr().out
    payload = read_json(tmp_path / "cmp" / "comparison.json")
    assert payload["a"]["config_hash"] == "ha"
    assert payload["metrics"]["accuracy"]["delta"] == pytest.approx(6 / 7 - 5 / 7)
    assert (tmp_path / "cmp" / "comparison.txt").is_file()


def test_compare_needs_both_reports(tmp_path):
    assert main(["compare", "--out", str(tmp_path / "cmp")]) == EXIT_USAGE
