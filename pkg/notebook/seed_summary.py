#!/usr/bin/env python3
# %%
"""
Multi-seed summary of desk-scale runs

Collects the evaluation reports and pre-training logs written by
scripts/run_pipeline.sh for several seeds and summarizes them: accuracy and
UF1 per arm (mean and std over seeds), the pre-trained minus scratch gap, and
the drop of the reconstruction loss moving average during pre-training.

Usage: python notebook/seed_summary.py [RUNS_DIR] [--min-gap POINTS] [--min-seeds N]

With --min-gap the script exits with status 1 unless the mean pre-trained
minus scratch accuracy gap over at least --min-seeds seeds reaches the given
number of points.
"""

# %%
import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
from loguru import logger
from tqdm import tqdm

from ma2mi.utils import read_json, read_jsonl

# Console handler that uses tqdm.write() to not interfere with progress bars
logger.remove()
logger.add(
    lambda msg: tqdm.write(msg, end=""),
    format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {message}",
    level="INFO",
    colorize=True
)


# %%
class RunAnalyzer:
    """
    Gathers metrics from a runs directory laid out as
    runs/seed_<n>/{pretrain,eval_scratch,eval_ma2mi,ablations/<arm>/eval}.
    """

    def __init__(self, runs_dir: str = "runs"):
        """
        Parameters:
        -----------
        runs_dir : str
            Directory holding one seed_<n> subdirectory per seed
        """
        self.runs_dir = Path(runs_dir)
        self.seed_dirs = sorted(p for p in self.runs_dir.glob("seed_*") if p.is_dir())

    def collect_reports(self) -> pd.DataFrame:
        """One row per (seed, arm) evaluation report."""
        rows: List[Dict] = []
        for seed_dir in tqdm(self.seed_dirs, desc="seeds"):
            seed = int(seed_dir.name.split("_", 1)[1])
            reports = {p.parent.name: p for p in seed_dir.glob("eval_*/report.json")}
            reports.update({p.parent.parent.name: p for p in seed_dir.glob("ablations/*/eval/report.json")})
            for arm, path in reports.items():
                report = read_json(path)
                rows.append({
                    "seed": seed,
                    "arm": arm.removeprefix("eval_"),
                    "accuracy": report["accuracy"],
                    "uf1": report["uf1"],
                    "folds": len(report["folds"]),
                    "config_hash": report["config_hash"],
                })
        if not rows:
            logger.warning(f"No evaluation reports found under {self.runs_dir}")
        return pd.DataFrame(rows)

    def summarize(self, reports: pd.DataFrame) -> pd.DataFrame:
        """Mean and std of accuracy and UF1 per arm over seeds."""
        if reports.empty:
            return reports
        return reports.groupby("arm")[["accuracy", "uf1"]].agg(["mean", "std", "count"])

    def transfer_gap(self, reports: pd.DataFrame, baseline: str = "scratch", arm: str = "ma2mi") -> pd.Series:
        """Per-seed accuracy gap arm - baseline, in accuracy points."""
        pivot = reports.pivot(index="seed", columns="arm", values="accuracy")
        if baseline not in pivot or arm not in pivot:
            return pd.Series(dtype=float)
        return (pivot[arm] - pivot[baseline]).dropna() * 100.0

    def check_transfer(self, reports: pd.DataFrame, min_gap: float, min_seeds: int = 3) -> bool:
        """True when the mean gap over at least min_seeds seeds reaches min_gap points."""
        gap = self.transfer_gap(reports) if not reports.empty else pd.Series(dtype=float)
        if len(gap) < min_seeds:
            logger.error(f"Transfer check needs {min_seeds} seeds with both arms, found {len(gap)}")
            return False
        if gap.mean() < min_gap:
            logger.error(f"Mean transfer gap {gap.mean():+.2f} points below the required {min_gap:+.2f}")
            return False
        logger.info(f"Mean transfer gap {gap.mean():+.2f} points over {len(gap)} seeds (required {min_gap:+.2f})")
        return True

    def reconstruction_drop(self, window: int = 10, steps: int = 50) -> pd.DataFrame:
        """Relative drop of the l_rec moving average from its first window to step `steps`."""
        rows = []
        for seed_dir in self.seed_dirs:
            log_path = seed_dir / "pretrain" / "pretrain_log.jsonl"
            if not log_path.is_file():
                continue
            log = pd.DataFrame([r for r in read_jsonl(log_path) if r.get("event") != "header"])
            if "l_rec" not in log or len(log) < window:
                continue
            moving = log["l_rec"].rolling(window).mean().dropna()
            start = moving.iloc[0]
            end = moving.iloc[min(len(moving), max(1, steps - window + 1)) - 1]
            rows.append({"seed": seed_dir.name, "start": start, "end": end, "drop": 1.0 - end / start})
        return pd.DataFrame(rows)

    def generate_report(self) -> None:
        reports = self.collect_reports()
        print("=" * 80)
        print("EVALUATION SUMMARY")
        print("=" * 80)
        if reports.empty:
            print("no reports")
            return
        print(self.summarize(reports).to_string(float_format=lambda v: f"{v:.4f}"))

        gap = self.transfer_gap(reports)
        if not gap.empty:
            print("\n" + "-" * 80)
            print("PRE-TRAINED MINUS SCRATCH (accuracy points)")
            print("-" * 80)
            print(gap.to_string(float_format=lambda v: f"{v:+.2f}"))
            print(f"mean over {len(gap)} seeds: {gap.mean():+.2f}")

        drops = self.reconstruction_drop()
        if not drops.empty:
            print("\n" + "-" * 80)
            print("RECONSTRUCTION LOSS DROP (moving average)")
            print("-" * 80)
            print(drops.to_string(index=False, float_format=lambda v: f"{v:.4f}"))


# %%
def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Summarize multi-seed desk runs.")
    parser.add_argument("runs_dir", nargs="?", default="runs")
    parser.add_argument("--min-gap", type=float, help="required mean pre-trained minus scratch gap (accuracy points)")
    parser.add_argument("--min-seeds", type=int, default=3, help="seeds needed for the transfer check")
    args = parser.parse_args(argv)

    analyzer = RunAnalyzer(args.runs_dir)
    analyzer.generate_report()
    if args.min_gap is None:
        return 0
    return 0 if analyzer.check_transfer(analyzer.collect_reports(), args.min_gap, args.min_seeds) else 1


if __name__ == '__main__':
    sys.exit(main())
