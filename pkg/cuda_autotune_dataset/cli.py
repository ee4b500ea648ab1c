"""
This is the main entrypoint for the kernel autotuning dataset pipeline. Each
subcommand runs one stage against a corpus root and picks up the manifests the
earlier stages left there; `all` runs them in order.
"""

# Standard
from collections import Counter
from typing import List, Optional
import argparse
import json
import os
import sys

# Local
from .build_exec import (
    CompilerNotFoundError,
    ExecutorBackend,
    RealBackend,
    SimulatedBackend,
    build_summary,
    build_units,
    load_build_results,
)
from .config import BACKENDS, ConfigError, PipelineConfig, load_config_file
from .constants import (
    ANALYSIS_DIR,
    DATASET_CSV,
    DATASET_JSONL,
    EXTRACT_MANIFEST,
    LARGEST_BLOCK,
    MINE_MANIFEST,
    PIPELINE_REPORT,
    REPORT_JSON,
    SMOKE_TIMEOUT_S,
)
from .corpus_miner import mine_corpus, read_jsonl
from .dataset_analysis import analyze_dataset
from .kernel_extractor import extract_corpus, load_units
from .launch import BlockConfig
from .log import configure_logging, log
from .measurement import evaluate_strategies, load_samples, synthetic_timing_pool
from .sweep import (
    SweepSpace,
    compact_to_csv,
    dataset_stats,
    load_rows,
    retry_timeouts,
    run_sweep,
)

# Parsed flags that override config values of the same name
OVERRIDE_KEYS = (
    "corpus_root",
    "repo_list",
    "seed",
    "backend",
    "timeout_s",
    "workers",
    "repeats",
    "strategy",
    "device_ids",
    "matrices",
    "blocks",
    "max_fix_attempts",
    "timestamps",
    "threshold",
    "gain",
    "default_block",
)

## Helpers #####################################################################


def make_backend(config: PipelineConfig) -> ExecutorBackend:
    if config.backend == "simulated":
        return SimulatedBackend(seed=config.seed)
    return RealBackend(config.compiler_template)


def _require_corpus(config: PipelineConfig):
    if not os.path.isdir(config.corpus_root):
        raise FileNotFoundError(f"Corpus root {config.corpus_root} does not exist")


def pipeline_report(corpus_root: str) -> dict:
    """Collect the stage manifests of a corpus into one summary"""
    report = {}
    mine_path = os.path.join(corpus_root, MINE_MANIFEST)
    if os.path.exists(mine_path):
        statuses = Counter(record["status"] for record in read_jsonl(mine_path))
        report["repos"] = dict(sorted(statuses.items()))

    extract_path = os.path.join(corpus_root, EXTRACT_MANIFEST)
    if os.path.exists(extract_path):
        records = read_jsonl(extract_path)
        statuses = Counter(record["status"] for record in records)
        report["extraction"] = {
            "candidates": len(records),
            "status_counts": dict(sorted(statuses.items())),
            "flagged_units": sorted(
                (
                    {"id": record["id"], "flags": record["flags"]}
                    for record in records
                    if record.get("flags")
                ),
                key=lambda entry: entry["id"],
            ),
        }

    build_results = load_build_results(corpus_root)
    if build_results:
        report["build"] = build_summary(build_results)

    jsonl_path = os.path.join(corpus_root, DATASET_JSONL)
    if os.path.exists(jsonl_path):
        report["dataset"] = dataset_stats(load_rows(jsonl_path))

    analysis_path = os.path.join(corpus_root, ANALYSIS_DIR, REPORT_JSON)
    if os.path.exists(analysis_path):
        with open(analysis_path, "r") as handle:
            report["analysis"] = json.load(handle)
    return report


## Stages ######################################################################


def run_mine(config: PipelineConfig, args: argparse.Namespace):
    if not config.repo_list:
        raise ConfigError("mine needs a repo list (--repo-list or repo_list)")
    mine_corpus(config.repo_list, config.corpus_root, config.fetch_workers)


def run_extract(config: PipelineConfig, args: argparse.Namespace):
    _require_corpus(config)
    extract_corpus(config.corpus_root, config.workers)


def run_build(config: PipelineConfig, args: argparse.Namespace):
    _require_corpus(config)
    units = load_units(config.corpus_root)
    if not units:
        log.warning("No isolated units under %s", config.corpus_root)
    build_units(
        units,
        make_backend(config),
        config.corpus_root,
        max_fix_attempts=config.max_fix_attempts,
        workers=config.workers,
        sample=getattr(args, "sample", None),
        seed=config.seed,
    )


def run_sweep_stage(config: PipelineConfig, args: argparse.Namespace):
    _require_corpus(config)
    results = load_build_results(config.corpus_root)
    ok_ids = {result.unit_id for result in results if result.ok}
    units = [unit for unit in load_units(config.corpus_root) if unit.id in ok_ids]
    log.info("Sweeping %d of %d built units", len(units), len(results))

    jsonl_path = os.path.join(config.corpus_root, DATASET_JSONL)
    if getattr(args, "retry_timeouts", False) and os.path.exists(jsonl_path):
        retry_timeouts(jsonl_path)
    run_sweep(
        units,
        SweepSpace(config.matrices, config.blocks),
        make_backend(config),
        jsonl_path,
        timeout_s=config.timeout_s,
        repeats=config.repeats,
        strategy=config.strategy,
        device_ids=config.device_ids,
        timestamps=config.timestamps,
    )
    compact_to_csv(jsonl_path, os.path.join(config.corpus_root, DATASET_CSV))


def run_aggregate_eval(config: PipelineConfig, args: argparse.Namespace):
    if args.synthetic:
        pool = synthetic_timing_pool(args.pool_size, args.outlier_fraction, config.seed)
    elif args.samples:
        pool = load_samples(args.samples)
    else:
        raise ConfigError("aggregate-eval needs a samples file or --synthetic")
    report = evaluate_strategies(pool, k=args.k, reps=args.reps, seed=config.seed)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))


def run_analyze(config: PipelineConfig, args: argparse.Namespace):
    for block in (config.default_block, BlockConfig(*LARGEST_BLOCK)):
        if block not in config.blocks:
            raise ConfigError(f"Block {block} is needed by analysis but not swept")
    csv_path = getattr(args, "dataset", None) or os.path.join(
        config.corpus_root, DATASET_CSV
    )
    output_dir = getattr(args, "output", None) or os.path.join(
        os.path.dirname(os.path.abspath(csv_path)), ANALYSIS_DIR
    )
    analyze_dataset(
        csv_path,
        output_dir,
        threshold=config.threshold,
        gain_threshold=config.gain,
        default_block=config.default_block,
        blocks=config.blocks,
    )


def run_report(config: PipelineConfig, args: argparse.Namespace):
    _require_corpus(config)
    report = pipeline_report(config.corpus_root)
    path = os.path.join(config.corpus_root, PIPELINE_REPORT)
    with open(path, "w") as handle:
        json.dump(report, handle, indent=2, sort_keys=True)
        handle.write("\n")
    log.info("Wrote %s", path)


def run_all(config: PipelineConfig, args: argparse.Namespace):
    if config.repo_list:
        run_mine(config, args)
    else:
        log.info("No repo list configured, using the corpus as mined")
    run_extract(config, args)
    run_build(config, args)
    run_sweep_stage(config, args)
    run_analyze(config, args)
    run_report(config, args)


## Parser ######################################################################


def _common_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", "-c", help="Flat TOML config file")
    parent.add_argument(
        "--corpus", dest="corpus_root", help="Corpus root holding repos and manifests"
    )
    parent.add_argument("--repo-list", dest="repo_list", help="Repository URL list")
    parent.add_argument(
        "--log-level",
        "-l",
        default=os.environ.get("LOG_LEVEL", "info"),
        help="Log level for informational logging",
    )
    parent.add_argument("--seed", type=int, help="Seed for sampling and simulation")
    parent.add_argument("--backend", choices=BACKENDS, help="Executor backend")
    parent.add_argument(
        "--timeout", dest="timeout_s", type=float, help="Per-run timeout in seconds"
    )
    parent.add_argument("--workers", type=int, help="Parallel extract/build workers")
    parent.add_argument("--repeats", type=int, help="Executions per sweep point")
    parent.add_argument("--strategy", help="Aggregation of repeated runtimes")
    parent.add_argument(
        "--devices", dest="device_ids", help="Comma separated device ids"
    )
    parent.add_argument("--matrices", nargs="+", help="Matrix sizes as WxH")
    parent.add_argument("--blocks", nargs="+", help="Blocks as X, XxY or XxYxZ")
    parent.add_argument(
        "--max-fix-attempts", dest="max_fix_attempts", type=int, help="Fix loop cap"
    )
    parent.add_argument(
        "--no-timestamps",
        dest="timestamps",
        action="store_const",
        const=False,
        help="Leave dataset timestamps empty for reproducible output",
    )
    return parent


def _analysis_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument(
        "--threshold", type=float, help="Performance threshold for the largest block"
    )
    parent.add_argument("--gain", type=float, help="Gain threshold over the default")
    parent.add_argument(
        "--default-block", dest="default_block", help="Default block, e.g. 1024"
    )
    return parent


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    analysis = _analysis_flags()
    parser = argparse.ArgumentParser(prog="cuda-autotune-dataset", description=__doc__)
    subparsers = parser.add_subparsers(dest="command", metavar="command")

    mine = subparsers.add_parser("mine", parents=[common], help="Download repos")
    mine.set_defaults(handler=run_mine)

    extract = subparsers.add_parser(
        "extract", parents=[common], help="Isolate global functions into units"
    )
    extract.set_defaults(handler=run_extract)

    build = subparsers.add_parser(
        "build", parents=[common], help="Compile units with the fix loop"
    )
    build.add_argument(
        "--sample", type=int, help="Build only a seeded sample of N units"
    )
    build.set_defaults(handler=run_build)

    sweep = subparsers.add_parser(
        "sweep", parents=[common], help="Benchmark built units over the sweep space"
    )
    sweep.add_argument(
        "--retry-timeouts",
        action="store_true",
        default=False,
        help="Re-run points previously recorded as timeouts",
    )
    sweep.add_argument(
        "--smoke",
        action="store_true",
        default=False,
        help=f"Use the {SMOKE_TIMEOUT_S}s smoke timeout unless --timeout is given",
    )
    sweep.set_defaults(handler=run_sweep_stage)

    aggregate_eval = subparsers.add_parser(
        "aggregate-eval",
        parents=[common],
        help="Compare aggregation strategies on a timing pool",
    )
    aggregate_eval.add_argument("samples", nargs="?", help="One value per line")
    aggregate_eval.add_argument(
        "--synthetic",
        action="store_true",
        default=False,
        help="Use a synthetic skewed pool with outliers",
    )
    aggregate_eval.add_argument("--k", type=int, default=10, help="Draws per rep")
    aggregate_eval.add_argument("--reps", type=int, default=10000, help="Repetitions")
    aggregate_eval.add_argument(
        "--pool-size", dest="pool_size", type=int, default=100000
    )
    aggregate_eval.add_argument(
        "--outlier-fraction", dest="outlier_fraction", type=float, default=0.02
    )
    aggregate_eval.set_defaults(handler=run_aggregate_eval)

    analyze = subparsers.add_parser(
        "analyze", parents=[common, analysis], help="Analyze a dataset CSV"
    )
    analyze.add_argument("dataset", nargs="?", help="Dataset CSV path")
    analyze.add_argument("--output", "-o", help="Output directory for reports")
    analyze.set_defaults(handler=run_analyze)

    report = subparsers.add_parser(
        "report", parents=[common], help="Summarize the stage manifests"
    )
    report.set_defaults(handler=run_report)

    run_all_parser = subparsers.add_parser(
        "all", parents=[common, analysis], help="Run every stage in order"
    )
    run_all_parser.set_defaults(handler=run_all)
    return parser


## Main ########################################################################


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand and return the process exit code"""
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return err.code if isinstance(err.code, int) else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    # Update the log level for the shared logger
    configure_logging(args.log_level)

    try:
        file_values = load_config_file(args.config) if args.config else {}
        overrides = {key: getattr(args, key, None) for key in OVERRIDE_KEYS}
        if getattr(args, "smoke", False) and overrides["timeout_s"] is None:
            overrides["timeout_s"] = SMOKE_TIMEOUT_S
        config = PipelineConfig.resolve(file_values, overrides)
        args.handler(config, args)
    except (ConfigError, CompilerNotFoundError) as err:
        log.error("Configuration error: %s", err)
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except Exception as err:
        log.error("Stage %s failed: %s", args.command, err)
        print(f"{args.command} failed: {err}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch())
