"""
Evaluation

Subject-independent cross-validation (LOSO / KFOLD), confusion matrices,
accuracy, unweighted F1 and run comparison.

Each fold fine-tunes a fresh head on the same pre-trained backbone, writes its
own result file, and the aggregate report pools the confusion matrices of all
folds before computing metrics.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from loguru import logger

from .checkpoint import Checkpoint, load_checkpoint
from .data import ClipRecord, SplitPlan, load_manifest, make_splits
from .exceptions import ReportMismatchError
from .finetune import Prediction, predict_records, train_classifier, write_predictions
from .run_config import RunConfig
from .utils import read_json, resolve_device, write_json

FOLDS_DIR = "folds"
REPORT_NAME = "report.json"


# =============================================================================
# Metrics
# =============================================================================

@dataclass
class ConfusionMatrix:
    """
    Class confusion counts; rows are true classes, columns predicted classes.
    """
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @classmethod
    def from_labels(cls, true: Sequence[int], pred: Sequence[int], num_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(true, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
        return cls(counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError(f"cannot add {self.num_classes}- and {other.num_classes}-class matrices")
        return ConfusionMatrix(self.counts + other.counts)

    def to_list(self) -> List[List[int]]:
        return self.counts.tolist()


def _require_nonempty(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")


def accuracy(cm: ConfusionMatrix) -> float:
    """
    trace / total.

    Examples:
    ---------
    >>> round(accuracy(ConfusionMatrix([[2, 1], [1, 3]])), 6)
    0.714286
    """
    _require_nonempty(cm)
    return float(np.trace(cm.counts)) / cm.total


def per_class_f1(cm: ConfusionMatrix) -> np.ndarray:
    """2TP / (2TP + FN + FP) per class; 0 where the denominator is 0."""
    tp = np.diag(cm.counts).astype(np.float64)
    fn = cm.counts.sum(axis=1) - tp
    fp = cm.counts.sum(axis=0) - tp
    denominator = 2 * tp + fn + fp
    return np.divide(2 * tp, denominator, out=np.zeros_like(tp), where=denominator > 0)


def uf1(cm: ConfusionMatrix) -> float:
    """
    Unweighted (macro) F1 over all classes of the matrix.

    Examples:
    ---------
    >>> round(uf1(ConfusionMatrix([[2, 1], [1, 3]])), 6)
    0.708333
    """
    _require_nonempty(cm)
    return float(per_class_f1(cm).mean())


# =============================================================================
# Folds and reports
# =============================================================================

@dataclass
class FoldResult:
    """
    Outcome of one cross-validation fold.

    Invariant: predictions cover exactly test_clip_ids.
    """
    fold: int
    test_clip_ids: List[str]
    predictions: List[Prediction]
    confusion: ConfusionMatrix
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        if sorted(p.clip_id for p in self.predictions) != sorted(self.test_clip_ids):
            raise ValueError(f"fold {self.fold}: predictions do not cover exactly the test clips")

    @property
    def accuracy(self) -> float:
        return accuracy(self.confusion)

    @property
    def uf1(self) -> float:
        return uf1(self.confusion)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fold": self.fold,
            "test_clip_ids": list(self.test_clip_ids),
            "predictions": [p.to_dict() for p in self.predictions],
            "confusion": self.confusion.to_list(),
            "accuracy": self.accuracy,
            "uf1": self.uf1,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FoldResult":
        return cls(
            fold=int(data["fold"]),
            test_clip_ids=list(data["test_clip_ids"]),
            predictions=[Prediction(**p) for p in data["predictions"]],
            confusion=ConfusionMatrix(data["confusion"]),
            warnings=list(data.get("warnings", [])),
        )

    def save(self, directory: Path) -> Path:
        path = Path(directory) / f"fold_{self.fold:03d}.json"
        write_json(path, self.to_dict())
        return path


def build_report(
    fold_results: Sequence[FoldResult],
    protocol: str,
    seed: int,
    config_hash: str,
    num_classes: Optional[int] = None
) -> Dict[str, Any]:
    """
    Aggregate report: pooled confusion across folds with accuracy and UF1
    computed on it, plus per-fold numbers.
    """
    if not fold_results:
        raise ValueError("no fold results to aggregate")
    ordered = sorted(fold_results, key=lambda r: r.fold)
    pooled = ordered[0].confusion
    for result in ordered[1:]:
        pooled = pooled + result.confusion
    if num_classes is not None and pooled.num_classes != num_classes:
        raise ReportMismatchError(f"fold matrices have {pooled.num_classes} classes, expected {num_classes}")
    return {
        "protocol": protocol,
        "seed": seed,
        "folds": [
            {
                "fold": r.fold,
                "n_test": r.confusion.total,
                "accuracy": r.accuracy,
                "uf1": r.uf1,
                "warnings": r.warnings,
            }
            for r in ordered
        ],
        "pooled_confusion": pooled.to_list(),
        "accuracy": accuracy(pooled),
        "uf1": uf1(pooled),
        "per_class_f1": per_class_f1(pooled).tolist(),
        "num_classes": pooled.num_classes,
        "config_hash": config_hash,
    }


def aggregate_fold_files(
    paths: Union[Path, Iterable[Path]],
    protocol: str,
    seed: int,
    config_hash: str
) -> Dict[str, Any]:
    """
    Build the aggregate report from fold result files, in any order.

    Parameters:
    -----------
    paths : Path or iterable of Path
        A directory of fold_*.json files, or the files themselves
    """
    if isinstance(paths, (str, Path)) and Path(paths).is_dir():
        files = sorted(Path(paths).glob("fold_*.json"))
    else:
        files = [Path(p) for p in paths]
    results = [FoldResult.from_dict(read_json(p)) for p in files]
    return build_report(results, protocol, seed, config_hash)


def run_protocol(
    records: Sequence[ClipRecord],
    plan: SplitPlan,
    tree: Dict[str, Any],
    checkpoint: Optional[Checkpoint] = None,
    seed: int = 0,
    config_hash: str = "",
    output_dir: Optional[Path] = None,
    device: Optional[torch.device] = None
) -> Dict[str, Any]:
    """
    Cross-validate fine-tuning over a split plan.

    Every fold fine-tunes from the same checkpoint (or from scratch) with seed
    seed + fold, predicts its test clips and, when output_dir is given, writes
    folds/fold_XXX.json. A class absent from a fold's training clips is
    recorded as a warning; the fold still runs.

    Returns:
    --------
    dict
        Aggregate report
    """
    plan.validate(records)
    by_id = {r.clip_id: r for r in records}
    num_classes = tree["finetune"]["num_classes"]
    device = device or torch.device("cpu")
    folds_dir = Path(output_dir) / FOLDS_DIR if output_dir is not None else None

    results = []
    for fold_id, fold in enumerate(plan.folds):
        train = [by_id[c] for c in fold.train]
        test = [by_id[c] for c in fold.test]
        warnings = []
        missing = sorted(set(range(num_classes)) - {r.label for r in train})
        if missing:
            message = f"classes {missing} absent from fold {fold_id} training clips"
            logger.warning(message)
            warnings.append(message)

        logger.info(f"Fold {fold_id + 1}/{len(plan.folds)}: {len(train)} train, {len(test)} test clips")
        trained = train_classifier(tree, train, checkpoint, seed=seed + fold_id, device=device)
        predictions = predict_records(trained.model, test, device=device)
        confusion = ConfusionMatrix.from_labels(
            [p.true for p in predictions], [p.pred for p in predictions], num_classes
        )
        result = FoldResult(fold_id, list(fold.test), predictions, confusion, warnings)
        if folds_dir is not None:
            result.save(folds_dir)
        logger.info(f"Fold {fold_id + 1}: accuracy {result.accuracy:.3f}, UF1 {result.uf1:.3f}")
        results.append(result)

    return build_report(results, plan.protocol, seed, config_hash, num_classes)


def run_eval(run: RunConfig, device: Optional[torch.device] = None) -> Path:
    """
    Cross-validate on the fine-tuning manifest.

    finetune.checkpoint selects the pre-trained weights (null = scratch).
    Writes splits.json, folds/, predictions.jsonl and report.json into the
    output directory.

    Returns:
    --------
    Path
        The aggregate report
    """
    tree = run.tree
    device = device or resolve_device()
    output_dir = run.output_dir
    output_dir.mkdir(parents=True, exist_ok=True)

    records = load_manifest(tree["data"]["finetune_manifest"], tree["finetune"]["num_classes"])
    evaluate_cfg = tree["evaluate"]
    plan = make_splits(records, evaluate_cfg["protocol"], evaluate_cfg["k"], run.seed)
    plan.save(output_dir / "splits.json")

    checkpoint = load_checkpoint(tree["finetune"]["checkpoint"]) if tree["finetune"]["checkpoint"] else None
    report = run_protocol(records, plan, tree, checkpoint, run.seed, run.config_hash, output_dir, device)
    report["pretrained"] = None if checkpoint is None else checkpoint.config_hash

    fold_files = sorted((output_dir / FOLDS_DIR).glob("fold_*.json"))
    predictions = [p for f in fold_files for p in FoldResult.from_dict(read_json(f)).predictions]
    write_predictions(output_dir / "predictions.jsonl", predictions, run.config_hash)

    path = output_dir / REPORT_NAME
    write_json(path, report)
    logger.info(
        f"{report['protocol']} over {len(plan.folds)} folds: accuracy {report['accuracy']:.4f}, "
        f"UF1 {report['uf1']:.4f}"
    )
    return path


# =============================================================================
# Comparison
# =============================================================================

def compare_runs(report_a: Dict[str, Any], report_b: Dict[str, Any]) -> pd.DataFrame:
    """
    Per-metric table of two reports with delta = b - a.

    Rows: accuracy, uf1 and f1_<class> for every class.

    Raises:
    -------
    ReportMismatchError
        The reports have different class counts
    """
    classes_a = len(report_a["pooled_confusion"])
    classes_b = len(report_b["pooled_confusion"])
    if classes_a != classes_b:
        raise ReportMismatchError(f"cannot compare a {classes_a}-class report with a {classes_b}-class report")

    def metrics(report: Dict[str, Any]) -> Dict[str, float]:
        cm = ConfusionMatrix(report["pooled_confusion"])
        values = {"accuracy": float(report["accuracy"]), "uf1": float(report["uf1"])}
        values.update({f"f1_{i}": float(v) for i, v in enumerate(per_class_f1(cm))})
        return values

    table = pd.DataFrame({"a": pd.Series(metrics(report_a)), "b": pd.Series(metrics(report_b))})
    table["delta"] = table["b"] - table["a"]
    table.index.name = "metric"
    return table


def comparison_payload(report_a: Dict[str, Any], report_b: Dict[str, Any], table: pd.DataFrame) -> Dict[str, Any]:
    """JSON form of a comparison with the metadata of both runs."""
    def meta(report: Dict[str, Any]) -> Dict[str, Any]:
        return {k: report.get(k) for k in ("config_hash", "protocol", "seed", "pretrained")}

    return {
        "a": meta(report_a),
        "b": meta(report_b),
        "metrics": {
            metric: {"a": row["a"], "b": row["b"], "delta": row["delta"]}
            for metric, row in table.iterrows()
        },
    }


def format_comparison(report_a: Dict[str, Any], report_b: Dict[str, Any], table: pd.DataFrame) -> str:
    header = (
        f"a: {report_a.get('config_hash')} ({report_a.get('protocol')}, seed {report_a.get('seed')})\n"
        f"b: {report_b.get('config_hash')} ({report_b.get('protocol')}, seed {report_b.get('seed')})\n"
    )
    return header + table.to_string(float_format=lambda v: f"{v:+.4f}" if v < 0 else f"{v:.4f}")
