import itertools
import json

import numpy as np
import pytest
import torch

from conftest import DESK_SEEDS
from ma2mi.data import load_manifest, make_splits
from ma2mi.evaluate import (
    ConfusionMatrix,
    FoldResult,
    accuracy,
    aggregate_fold_files,
    build_report,
    compare_runs,
    comparison_payload,
    format_comparison,
    per_class_f1,
    run_eval,
    run_protocol,
    uf1,
)
from ma2mi.exceptions import ReportMismatchError
from ma2mi.finetune import Prediction
from ma2mi.utils import read_json, read_jsonl


def _uf1_from_label_lists(counts):
    n = counts.shape[0]
    truths, preds = [], []
    for t in range(n):
        for p in range(n):
            truths += [t] * int(counts[t, p])
            preds += [p] * int(counts[t, p])
    scores = []
    for c in range(n):
        tp = sum(1 for t, p in zip(truths, preds) if t == c and p == c)
        predicted = sum(1 for p in preds if p == c)
        actual = sum(1 for t in truths if t == c)
        precision = tp / predicted if predicted else 0.0
        recall = tp / actual if actual else 0.0
        scores.append(0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall))
    return sum(scores) / n


def _fold(fold, true, pred, num_classes=2):
    ids = [f"f{fold}_c{i}" for i in range(len(true))]
    predictions = [Prediction(c, t, p, [0.0] * num_classes) for c, t, p in zip(ids, true, pred)]
    return FoldResult(fold, ids, predictions, ConfusionMatrix.from_labels(true, pred, num_classes))


# =============================================================================
# Metrics
# =============================================================================

def test_accuracy_and_uf1_known_example():
    cm = ConfusionMatrix([[2, 1], [1, 3]])
    assert accuracy(cm) == pytest.approx(5 / 7)
    assert uf1(cm) == pytest.approx(0.708333, abs=1e-6)
    assert per_class_f1(cm).tolist() == pytest.approx([2 / 3, 0.75])


def test_uf1_matches_per_class_precision_recall_on_random_matrices():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 1000:
        n = int(rng.integers(2, 7))
        counts = rng.integers(0, 6, size=(n, n))
        if counts.sum() == 0:
            continue
        assert abs(uf1(ConfusionMatrix(counts)) - _uf1_from_label_lists(counts)) <= 1e-12
        checked += 1


def test_metrics_are_invariant_to_class_relabeling():
    rng = np.random.default_rng(1)
    counts = rng.integers(0, 9, size=(4, 4))
    base = ConfusionMatrix(counts)
    for perm in itertools.permutations(range(4)):
        permuted = ConfusionMatrix(counts[np.ix_(perm, perm)])
        assert accuracy(permuted) == pytest.approx(accuracy(base))
        assert uf1(permuted) == pytest.approx(uf1(base))


def test_absent_class_scores_zero_f1():
    cm = ConfusionMatrix([[3, 0, 0], [0, 2, 0], [0, 0, 0]])
    assert per_class_f1(cm).tolist() == [1.0, 1.0, 0.0]
    assert uf1(cm) == pytest.approx(2 / 3)


def test_empty_matrix_is_an_error():
    with pytest.raises(ValueError):
        accuracy(ConfusionMatrix.zeros(3))
    with pytest.raises(ValueError):
        uf1(ConfusionMatrix.zeros(3))


def test_confusion_matrix_validation():
    with pytest.raises(ValueError):
        ConfusionMatrix([[1, 2, 3]])
    with pytest.raises(ValueError):
        ConfusionMatrix([[1, -1], [0, 0]])
    with pytest.raises(ValueError):
        ConfusionMatrix.zeros(2) + ConfusionMatrix.zeros(3)


# =============================================================================
# Folds and reports
# =============================================================================

def test_fold_result_must_cover_test_clips():
    with pytest.raises(ValueError):
        FoldResult(0, ["a", "b"], [Prediction("a", 0, 0, [1.0, 0.0])], ConfusionMatrix.zeros(2))


def test_pooled_report_sums_fold_matrices():
    folds = [_fold(0, [0, 1, 1], [0, 1, 0]), _fold(1, [0, 0, 1, 1], [1, 0, 1, 1])]
    report = build_report(folds, "LOSO", 0, "hash", num_classes=2)
    assert report["pooled_confusion"] == [[2, 1], [1, 3]]
    assert report["accuracy"] == pytest.approx(5 / 7)
    assert report["uf1"] == pytest.approx(0.708333, abs=1e-6)
    assert [f["fold"] for f in report["folds"]] == [0, 1]
    assert [f["n_test"] for f in report["folds"]] == [3, 4]


def test_report_rejects_class_count_mismatch():
    with pytest.raises(ReportMismatchError):
        build_report([_fold(0, [0, 1], [0, 1])], "LOSO", 0, "hash", num_classes=3)


def test_aggregation_ignores_fold_file_order(tmp_path):
    folds = [_fold(i, [0, 1, i % 2], [0, i % 2, 1]) for i in range(4)]
    paths = [f.save(tmp_path) for f in folds]
    forward = aggregate_fold_files(paths, "KFOLD", 2, "h")
    backward = aggregate_fold_files(list(reversed(paths)), "KFOLD", 2, "h")
    from_dir = aggregate_fold_files(tmp_path, "KFOLD", 2, "h")
    assert forward == backward == from_dir


def test_fold_file_round_trip(tmp_path):
    fold = _fold(3, [0, 1], [1, 1])
    loaded = FoldResult.from_dict(read_json(fold.save(tmp_path)))
    assert loaded.to_dict() == fold.to_dict()
    assert (tmp_path / "fold_003.json").is_file()


def test_compare_runs_table():
    a = build_report([_fold(0, [0, 1, 1], [0, 1, 0])], "LOSO", 0, "ha")
    b = build_report([_fold(0, [0, 1, 1], [0, 1, 1])], "LOSO", 0, "hb")
    table = compare_runs(a, b)
    assert list(table.index) == ["accuracy", "uf1", "f1_0", "f1_1"]
    assert table.loc["accuracy", "delta"] == pytest.approx(1.0 - 2 / 3)
    payload = comparison_payload(a, b, table)
    assert payload["a"]["config_hash"] == "ha"
    json.dumps(payload)
    assert "hb" in format_comparison(a, b, table)


def test_compare_runs_rejects_different_class_counts():
    a = build_report([_fold(0, [0, 1], [0, 1])], "LOSO", 0, "a")
    b = build_report([_fold(0, [0, 2], [0, 2], num_classes=3)], "LOSO", 0, "b")
    with pytest.raises(ReportMismatchError):
        compare_runs(a, b)


# =============================================================================
# Cross-validation on the tiny corpus
# =============================================================================

def test_run_protocol_covers_every_clip(make_run, corpus_dir, tmp_path):
    tree = make_run("finetune.epochs=1").tree
    records = load_manifest(corpus_dir / "finetune.jsonl", 3)
    plan = make_splits(records, "LOSO", seed=0)
    report = run_protocol(records, plan, tree, seed=0, config_hash="h", output_dir=tmp_path)
    assert len(report["folds"]) == 3
    assert sum(f["n_test"] for f in report["folds"]) == len(records)
    assert sum(map(sum, report["pooled_confusion"])) == len(records)
    assert len(list((tmp_path / "folds").glob("fold_*.json"))) == 3
    assert aggregate_fold_files(tmp_path / "folds", "LOSO", 0, "h") == report


def test_run_eval_is_reproducible(make_run):
    first = make_run("finetune.epochs=1", out="a")
    second = make_run("finetune.epochs=1", out="b")
    report_a = read_json(run_eval(first, torch.device("cpu")))
    report_b = read_json(run_eval(second, torch.device("cpu")))
    assert report_a == report_b
    assert report_a["pretrained"] is None
    assert report_a["config_hash"] == first.config_hash
    assert (first.output_dir / "splits.json").is_file()
    predictions = read_jsonl(first.output_dir / "predictions.jsonl")
    assert len(predictions) == 9
    assert {p["config_hash"] for p in predictions} == {first.config_hash}


def test_kfold_protocol_through_config(make_run):
    run = make_run("finetune.epochs=1", "evaluate.protocol=KFOLD", "evaluate.k=2")
    report = read_json(run_eval(run, torch.device("cpu")))
    assert report["protocol"] == "KFOLD" and len(report["folds"]) == 2


def test_missing_training_class_is_a_fold_warning(make_run, corpus_dir, tmp_path):
    tree = make_run("finetune.epochs=1", "finetune.num_classes=4").tree
    records = load_manifest(corpus_dir / "finetune.jsonl", 4)
    report = run_protocol(records, make_splits(records, "LOSO"), tree)
    assert all(f["warnings"] for f in report["folds"])
    assert report["num_classes"] == 4


@pytest.mark.slow
def test_desk_pretraining_beats_scratch_by_five_points(desk_run, desk_pretrained):
    gaps = []
    for seed in DESK_SEEDS:
        scratch = read_json(run_eval(desk_run(out=f"eval_scratch_{seed}", seed=seed), torch.device("cpu")))
        pretrained = read_json(run_eval(
            desk_run(f"finetune.checkpoint={desk_pretrained(seed)}", out=f"eval_ma2mi_{seed}", seed=seed),
            torch.device("cpu"),
        ))
        assert scratch["protocol"] == pretrained["protocol"] == "LOSO"
        gaps.append(100.0 * (pretrained["accuracy"] - scratch["accuracy"]))
    assert sum(gaps) / len(gaps) >= 5.0
