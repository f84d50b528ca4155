"""
MA2MI command line

Entry point of the pipeline: synthetic corpus generation, codec pre-fit,
pre-training, fine-tuning, cross-validated evaluation, run comparison and
visualizations. Exit codes: 0 success, 1 usage or configuration error,
2 runtime failure.
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from loguru import logger

from .exceptions import ConfigError
from .run_config import RunConfig, describe_keys, load_run_config
from .utils import resolve_device, setup_logging

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

COMMANDS = {
    "synth-gen": "generate the synthetic macro/micro corpus",
    "fit-codec": "pre-fit the latent codec on the pre-training manifest",
    "pretrain": "macro-to-micro pre-training (or the MAER baseline)",
    "finetune": "fine-tune a classifier on onset/apex pairs",
    "eval": "LOSO / KFOLD cross-validation on the fine-tuning manifest",
    "compare": "delta table between two evaluation reports",
    "viz-recon": "reconstruction grid from a pre-training checkpoint",
    "viz-cam": "Grad-CAM heat map from a fine-tuned checkpoint",
}


class UsageErrorParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so usage errors map to exit code 1."""

    def error(self, message: str):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = UsageErrorParser(
        prog="ma2mi",
        description="Macro-to-micro transfer learning for micro-expression recognition.",
        epilog=describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", metavar="command", parser_class=UsageErrorParser)
    subparsers.required = True
    for name, help_text in COMMANDS.items():
        sub = subparsers.add_parser(
            name, help=help_text, description=help_text,
            epilog=describe_keys(), formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        sub.add_argument("--config", metavar="PATH", help="JSON config file merged onto the defaults")
        sub.add_argument(
            "--set", dest="overrides", metavar="KEY=VALUE", action="append", default=[],
            help="dotted-key override, e.g. optim.lr=0.0004 (repeatable)",
        )
        sub.add_argument("--seed", type=int, help="run seed")
        sub.add_argument("--out", metavar="DIR", help="output directory")
        sub.add_argument("--device", help="torch device (default: cuda when available)")
        sub.add_argument("--log-level", default="INFO", help="console log level")
    return parser


def resolve_run(args: argparse.Namespace) -> RunConfig:
    """Config of one invocation; synth-gen maps --seed/--out onto the corpus section."""
    overrides: List[str] = list(args.overrides)
    seed, output_dir = args.seed, args.out
    if args.command == "synth-gen":
        if args.seed is not None:
            overrides.append(f"corpus.seed={args.seed}")
        if args.out is not None:
            overrides.append(f"corpus.root={args.out}")
            output_dir = None
    return load_run_config(args.config, overrides, seed=seed, output_dir=output_dir)


def run_command(command: str, run: RunConfig, device_name: Optional[str] = None) -> Path:
    """Dispatch one subcommand; returns its main artifact."""
    # stage modules pull in torch; imported per command so --help stays fast
    if command == "synth-gen":
        from .synth import CorpusConfig, generate_corpus
        result = generate_corpus(
            CorpusConfig.from_dict(run.tree["corpus"]), run.tree["corpus"]["root"], run.config_hash
        )
        return result.finetune_manifest.parent / "corpus.json"

    if command == "compare":
        from .evaluate import compare_runs, comparison_payload, format_comparison
        from .utils import read_json, write_json
        section = run.tree["evaluate"]
        if not section["report_a"] or not section["report_b"]:
            raise ConfigError("compare needs evaluate.report_a and evaluate.report_b")
        report_a, report_b = read_json(section["report_a"]), read_json(section["report_b"])
        table = compare_runs(report_a, report_b)
        text = format_comparison(report_a, report_b, table)
        print(text)
        run.output_dir.mkdir(parents=True, exist_ok=True)
        (run.output_dir / "comparison.txt").write_text(text + "\n", encoding="utf-8")
        path = run.output_dir / "comparison.json"
        write_json(path, {**comparison_payload(report_a, report_b, table), "config_hash": run.config_hash})
        return path

    device = resolve_device(device_name)
    if command == "fit-codec":
        from .pretrain import run_fit_codec
        return run_fit_codec(run, device)
    if command == "pretrain":
        from .pretrain import run_pretrain
        return run_pretrain(run, device)
    if command == "finetune":
        from .finetune import run_finetune
        return run_finetune(run, device)
    if command == "eval":
        from .evaluate import run_eval
        return run_eval(run, device)
    if command == "viz-recon":
        from .viz import run_viz_recon
        return run_viz_recon(run, device)
    if command == "viz-cam":
        from .viz import run_viz_cam
        return run_viz_cam(run, device)
    raise ConfigError(f"unknown command {command!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run the CLI.

    Parameters:
    -----------
    argv : sequence of str, optional
        Arguments without the program name (default: sys.argv[1:])

    Returns:
    --------
    int
        Exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        run = resolve_run(args)
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    except ConfigError as e:
        setup_logging()
        logger.error(str(e))
        return EXIT_USAGE

    log_dir = run.tree["corpus"]["root"] if args.command == "synth-gen" else run.output_dir
    setup_logging(log_dir, args.log_level)
    logger.info(f"{args.command}: config {run.config_hash}, seed {run.seed}")
    try:
        artifact = run_command(args.command, run, args.device)
    except ConfigError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        logger.opt(exception=e).debug("failure detail")
        return EXIT_FAILURE
    logger.info(f"{args.command} finished: {artifact}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
