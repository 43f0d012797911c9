"""
Command-line entry point for pagebook: corpus generation, simulation, grids, ablations,
LoCoMo method comparison, report statistics and acceptance checks.
"""

import argparse
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

import requests

from config import settings
from config.run_config import RunConfig, apply, config_hash, describe, load_run_config
from integrations import get_judges
from services.datasets import (
    Conversation, SyntheticSpec, gen_revisit_variant, gen_synthetic, load_corpus, load_locomo_corpus, save_corpus
)
from services.harness import (
    ExperimentPlan, check_belady, check_bookmarks, check_decomposition, check_false_positives, check_formats,
    check_granularity, check_inversion, check_token_envelope, run_bookmark_ablation, run_format_ablation,
    run_grid, run_methods, run_specificity_ablation
)
from services.metrics import ProbeResult, aggregate_by, judge_agreement, paired_bootstrap
from services import reports
from utils.errors import ConfigError, PagebookError
from utils.logging import get_logger, setup_logging

logger = get_logger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


# Config plumbing

def _split(value: Optional[str], everything: Sequence[str] = ()) -> Optional[List[str]]:
    if value is None:
        return None
    if value == "all" and everything:
        return list(everything)
    return [item.strip() for item in value.split(",") if item.strip()]


def _flags(args: argparse.Namespace) -> Dict[str, Any]:
    """CLI flags as dotted run-config keys; unset flags are None and ignored."""
    def get(name: str) -> Any:
        return getattr(args, name, None)

    return {
        "dataset": get("dataset"),
        "corpus": get("corpus"),
        "responder": "mock" if get("dry_run") else get("responder"),
        "judges": _split(get("judges")),
        "methods": _split(get("methods"), settings.METHODS),
        "seed": get("seed"),
        "out": get("out"),
        "pager.boundaries": _split(get("boundaries")),
        "pager.evictions": _split(get("evictions")),
        "pager.budget_k": get("budget_k"),
        "bookmarks.strategy": get("strategy"),
        "bookmarks.format": get("format"),
        "mock.gullibility": True if get("gullible") else None,
        "datasets.locomo_path": get("locomo"),
        "datasets.max_qa_per_conv": get("probes"),
        "harness.jobs": get("jobs"),
    }


def _config(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(args.config, args.set or [], _flags(args))
    apply(config)
    return config


def _plan(config: RunConfig) -> ExperimentPlan:
    return ExperimentPlan(
        dataset=config.dataset,
        boundaries=list(config.pager.boundaries),
        evictions=list(config.pager.evictions),
        bookmark_strategy=config.bookmarks.strategy,
        bookmark_format=config.bookmarks.format,
        responder=config.responder,
        judges=list(config.judges),
        methods=list(config.methods),
        seed=config.seed,
        budget_k=config.pager.budget_k,
        max_tool_rounds=config.model.max_tool_rounds,
        jobs=config.harness.jobs,
        gullibility=config.mock.gullibility,
    ).validate()


def _corpus(config: RunConfig, dataset: Optional[str] = None) -> List[Conversation]:
    dataset = dataset or config.dataset
    if config.corpus and dataset == config.dataset:
        return load_corpus(config.corpus)
    if dataset == "locomo":
        if not config.datasets.locomo_path:
            raise ConfigError("datasets.locomo_path: no LoCoMo file given (--locomo or PAGEBOOK_LOCOMO)")
        return load_locomo_corpus(config.datasets.locomo_path, config.datasets.max_qa_per_conv, config.seed)
    if dataset == "synthetic_controlled":
        return gen_synthetic(SyntheticSpec.controlled(config.seed))
    spec = SyntheticSpec.from_config(seed=config.seed)
    if dataset == "synthetic_revisit":
        return gen_revisit_variant(spec)
    return gen_synthetic(spec)


def _out(command: str, config: RunConfig) -> Path:
    digest = config_hash(config)
    out = reports.run_dir(command, digest, config.out)
    reports.write_manifest(out, command, config.model_dump(mode="json"), digest)
    return out


# Commands

def cmd_gen(args: argparse.Namespace) -> int:
    config = _config(args)
    if args.preset == "controlled":
        spec = SyntheticSpec.controlled(config.seed)
    else:
        spec = SyntheticSpec.from_config(
            seed=config.seed,
            num_conversations=args.conversations or config.datasets.num_conversations,
            topology=args.topology,
        )
    corpus = gen_revisit_variant(spec) if spec.topology == "revisit" else gen_synthetic(spec)
    path = args.output or str(Path(config.out) / f"corpus-{spec.name}-{spec.topology}-{config.seed}.jsonl")
    save_corpus(corpus, path)
    probes = sum(len(conv.probes) for conv in corpus)
    print(f"{len(corpus)} conversations, {probes} probes -> {path}")
    return EXIT_OK


def _print_frame(frame, columns: Sequence[str]):
    present = [c for c in columns if c in frame.columns]
    print(frame[present].to_string(index=False))


def cmd_grid(args: argparse.Namespace, command: str = "grid") -> int:
    config = _config(args)
    plan = _plan(config)
    report = run_grid(plan, _corpus(config))
    out = _out(command, config)
    reports.write_grid(out, report)
    _print_frame(reports.grid_frame(report), [
        "boundary", "eviction", "status", "e2e_accuracy", "trigger_rate", "selection_accuracy",
        "false_positive_rate", "avg_pages", "eviction_rate",
    ])
    print(f"report: {out}")
    failed = [cell for cell in report.cells if cell.status == "failed"]
    return EXIT_RUNTIME if failed and len(failed) == len(report.cells) else EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    args.boundaries = args.boundary
    args.evictions = args.eviction
    return cmd_grid(args, command="simulate")


def cmd_locomo(args: argparse.Namespace) -> int:
    args.dataset = "locomo"
    config = _config(args)
    plan = _plan(config)
    judges = get_judges(plan.judges, plan.responder)
    report = run_methods(plan, _corpus(config), judges=judges)
    out = _out("locomo", config)
    reports.write_methods(out, report)
    _print_frame(reports.method_frame(report), ["method", "mean_score", "e2e_accuracy", "n", "mean_llm_calls",
                                                "sig_delta", "sig_p"])
    if not report.recent_blocks_identical:
        logger.warning("Recent blocks differ across methods")
    print(f"report: {out}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    if args.which == "formats" and not args.dataset and not args.corpus:
        args.dataset = "synthetic_controlled"
    config = _config(args)
    plan = _plan(config)
    corpus = _corpus(config)
    if args.which == "bookmarks":
        report = run_bookmark_ablation(plan, corpus, stress=args.stress)
    elif args.which == "formats":
        report = run_format_ablation(plan, corpus, stress=args.stress)
    else:
        report = run_specificity_ablation(plan, corpus, stress=args.stress)
    out = _out(f"ablate-{args.which}", config)
    reports.write_ablation(out, report)
    _print_frame(reports.ablation_frame(report), [
        "variant", "e2e_accuracy", "trigger_rate", "selection_accuracy", "mean_stub_tokens", "scripted", "trace_hash",
    ])
    print(f"traces identical: {report.traces_identical}")
    print(f"report: {out}")
    return EXIT_OK


def _load_results(path: str) -> List[ProbeResult]:
    names = {f.name for f in fields(ProbeResult)}
    try:
        records = reports.read_jsonl(Path(path))
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read probe table {path}: {e}")
    return [ProbeResult(**{k: v for k, v in record.items() if k in names}) for record in records]


def _paired_values(result: ProbeResult) -> float:
    return result.mean_score if result.mean_score is not None else float(result.answer_correct)


def cmd_report(args: argparse.Namespace) -> int:
    config = _config(args)
    tables = [_load_results(path) for path in args.tables]
    out = _out("report", config)

    rows = []
    for path, results in zip(args.tables, tables):
        for group, metrics in aggregate_by(results, args.by, seed=config.seed).items():
            row = {"table": path, args.by: group}
            row.update(metrics.to_record())
            rows.append(row)
    frame = reports.table_frame(rows)
    frame.to_csv(out / "stats.csv", index=False)
    _print_frame(frame, ["table", args.by, "e2e_accuracy", "ci95_lo", "ci95_hi", "mean_score", "n"])

    agreement = judge_agreement(tables[0])
    if agreement:
        reports.table_frame([{"judge_a": a, "judge_b": b, "pearson": r} for (a, b), r in sorted(agreement.items())]) \
            .to_csv(out / "agreement.csv", index=False)
        for (a, b), r in sorted(agreement.items()):
            print(f"pearson {a} vs {b}: {r}")

    if len(tables) == 2:
        first = {(r.conv_id, r.method, r.probe_id): r for r in tables[0]}
        second = {(r.conv_id, r.method, r.probe_id): r for r in tables[1]}
        shared = sorted(set(first) & set(second))
        if not shared:
            raise ConfigError("the two probe tables share no probes")
        delta, p = paired_bootstrap([_paired_values(first[k]) for k in shared],
                                    [_paired_values(second[k]) for k in shared], seed=config.seed)
        print(f"paired bootstrap over {len(shared)} probes: delta={delta:.4f} p={p:.4f}")
        reports.table_frame([{"delta": delta, "p": p, "n": len(shared)}]).to_csv(out / "paired.csv", index=False)
    print(f"report: {out}")
    return EXIT_OK


def cmd_check(args: argparse.Namespace) -> int:
    config = _config(args)
    plan = _plan(config)
    forward = run_grid(plan, _corpus(config, "synthetic_forward"))
    revisit = run_grid(plan, _corpus(config, "synthetic_revisit"))
    formats = run_format_ablation(plan, _corpus(config, "synthetic_controlled"))
    bookmarks = run_bookmark_ablation(plan, _corpus(config, "synthetic_forward"))

    checks = [
        check_belady(forward),
        check_granularity(forward),
        check_inversion(forward, revisit),
        check_false_positives(forward),
        check_decomposition(forward),
        check_formats(formats),
        check_bookmarks(bookmarks),
        check_token_envelope(),
    ]
    out = _out("check", config)
    reports.write_checks(out, checks)
    for check in checks:
        print(f"{'PASS' if check.passed else 'FAIL'} {check.name}: {check.detail}")
    return EXIT_OK if all(check.passed for check in checks) else EXIT_CHECK


# Parser

def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="YAML run config")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config key, e.g. pager.budget_k=3")
    parser.add_argument("--out", help="Output root directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--jobs", type=int, help="Parallel workers")
    parser.add_argument("--log-level", default=None)


def _run_options(parser: argparse.ArgumentParser):
    parser.add_argument("--dataset", choices=["synthetic_forward", "synthetic_revisit", "synthetic_controlled", "locomo"])
    parser.add_argument("--corpus", help="Corpus file written by gen")
    parser.add_argument("--responder", choices=["mock", "live"])
    parser.add_argument("--budget-k", type=int, dest="budget_k")
    parser.add_argument("--strategy", help="Keyword strategy")
    parser.add_argument("--format", help="Bookmark format")
    parser.add_argument("--gullible", action="store_true", help="Mock answers from rich stubs")
    parser.add_argument("--locomo", help="LoCoMo JSON file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pagebook",
        description="Cooperative memory paging: bookmarks, recall and their evaluation.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys (YAML or --set):\n" + "\n".join(describe()),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="Generate a synthetic corpus")
    _common(gen)
    gen.add_argument("--conversations", type=int)
    gen.add_argument("--topology", choices=["forward", "revisit"], default="forward")
    gen.add_argument("--preset", choices=["controlled"])
    gen.add_argument("--output", help="Corpus file path")
    gen.set_defaults(func=cmd_gen)

    simulate = sub.add_parser("simulate", help="Run one boundary/eviction cell")
    _common(simulate)
    _run_options(simulate)
    simulate.add_argument("--boundary", default="fixed_10")
    simulate.add_argument("--eviction", default="lru")
    simulate.set_defaults(func=cmd_simulate)

    grid = sub.add_parser("grid", help="Run the boundary x eviction grid")
    _common(grid)
    _run_options(grid)
    grid.add_argument("--boundaries", help="Comma-separated boundary strategies")
    grid.add_argument("--evictions", help="Comma-separated eviction policies")
    grid.set_defaults(func=cmd_grid)

    locomo = sub.add_parser("locomo", help="Compare the six context methods on LoCoMo")
    _common(locomo)
    _run_options(locomo)
    locomo.add_argument("--methods", help="Comma-separated methods or 'all'")
    locomo.add_argument("--judges", help="Comma-separated judge model names")
    locomo.add_argument("--probes", type=int, help="Probes per conversation")
    locomo.add_argument("--dry-run", action="store_true", dest="dry_run", help="Mock responder and exact-match judge")
    locomo.set_defaults(func=cmd_locomo)

    ablate = sub.add_parser("ablate", help="Bookmark strategy, format or specificity ablation")
    _common(ablate)
    _run_options(ablate)
    ablate.add_argument("which", choices=["bookmarks", "formats", "specificity"])
    ablate.add_argument("--stress", action="store_true", help="Use the fixed_5 boundary")
    ablate.set_defaults(func=cmd_ablate)

    report = sub.add_parser("report", help="Statistics over written probe tables")
    _common(report)
    report.add_argument("tables", nargs="+", help="One or two results.jsonl files")
    report.add_argument("--by", default="method", choices=["method", "category", "conv_id"])
    report.set_defaults(func=cmd_report)

    check = sub.add_parser("check", help="Evaluate the acceptance checks on the mock")
    _common(check)
    _run_options(check)
    check.set_defaults(func=cmd_check)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    if args.command == "report" and len(args.tables) > 2:
        parser.error("report takes one or two probe tables")
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (PagebookError, requests.RequestException) as e:
        logger.error(f"Run failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
