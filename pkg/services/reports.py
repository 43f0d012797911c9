"""
Result files: per-probe JSONL, per-cell / per-variant CSV tables, heatmap pivots and a run manifest.
"""

import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import pandas as pd

from config.settings import app_config
from models.bookmark import default_stopwords
from services.harness import AblationReport, CheckResult, GridReport, MethodReport
from services.metrics import ProbeResult
from utils.logging import get_logger

logger = get_logger(__name__)

SCHEMA_VERSION = 1


def run_dir(command: str, config_hash: str, root: Optional[str] = None) -> Path:
    """``<root>/<command>-<hash[:12]>``, created if missing."""
    path = Path(root or app_config.out_dir) / f"{command}-{config_hash[:12]}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_jsonl(path: Path, records: Iterable[Dict[str, Any]]) -> Path:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True, ensure_ascii=False, default=str) + "\n")
    os.replace(tmp, path)
    return path


def read_jsonl(path: Path) -> List[Dict[str, Any]]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def table_frame(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    frame = pd.DataFrame(rows)
    frame.insert(0, "schema_version", SCHEMA_VERSION)
    return frame


def results_frame(results: Iterable[ProbeResult]) -> pd.DataFrame:
    return table_frame([result.to_record() for result in results])


def write_manifest(out: Path, command: str, config: Dict[str, Any], config_hash: str,
                   extra: Optional[Dict[str, Any]] = None) -> Path:
    stopwords = default_stopwords()
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config_hash": config_hash,
        "config": config,
        "stopwords_sha256": stopwords.digest,
        "app_version": app_config.app_version,
    }
    manifest.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str), encoding="utf-8")
    return path


# Grid

def grid_frame(report: GridReport) -> pd.DataFrame:
    return table_frame([cell.summary() for cell in report.cells])


def heatmap(frame: pd.DataFrame, value: str = "e2e_accuracy") -> pd.DataFrame:
    """Boundary x eviction pivot of one metric; failed cells stay empty."""
    ok = frame[frame["status"] == "ok"]
    return ok.pivot_table(index="boundary", columns="eviction", values=value, aggfunc="mean")


def category_frame(report: GridReport) -> pd.DataFrame:
    rows = []
    for cell in report.cells:
        for category, metrics in cell.per_category.items():
            row = {"boundary": cell.boundary, "eviction": cell.eviction, "category": category}
            row.update(metrics.to_record())
            rows.append(row)
    return table_frame(rows)


def write_grid(out: Path, report: GridReport) -> Dict[str, Path]:
    frame = grid_frame(report)
    paths = {
        "results": write_jsonl(out / "results.jsonl", (
            dict(r.to_record(), boundary=c.boundary, eviction=c.eviction)
            for c in report.cells for r in c.results)),
        "grid": out / "grid.csv",
        "heatmap": out / "heatmap.csv",
        "decomposition": out / "decomposition.csv",
        "categories": out / "categories.csv",
    }
    frame.to_csv(paths["grid"], index=False)
    if not frame.empty and (frame["status"] == "ok").any():
        heatmap(frame).to_csv(paths["heatmap"])
        decomposition = frame[frame["status"] == "ok"][
            ["boundary", "eviction", "trigger_rate", "selection_accuracy", "e2e_on_evicted", "avg_pages"]]
        decomposition.to_csv(paths["decomposition"], index=False)
    category_frame(report).to_csv(paths["categories"], index=False)
    logger.info(f"Wrote grid report to {out}")
    return paths


# Ablations

def ablation_frame(report: AblationReport) -> pd.DataFrame:
    frame = table_frame([row.summary() for row in report.rows])
    frame.insert(1, "ablation", report.kind)
    return frame


def write_ablation(out: Path, report: AblationReport) -> Dict[str, Path]:
    paths = {
        "results": write_jsonl(out / "results.jsonl", (r.to_record() for r in report.results)),
        "table": out / f"{report.kind}.csv",
    }
    ablation_frame(report).to_csv(paths["table"], index=False)
    logger.info(f"Wrote {report.kind} ablation to {out}")
    return paths


# Methods

def method_frame(report: MethodReport) -> pd.DataFrame:
    rows = []
    for method, metrics in report.per_method.items():
        row = {"method": method}
        row.update(metrics.to_record())
        row.update({f"sig_{k}": v for k, v in report.significance.get(method, {}).items()})
        rows.append(row)
    return table_frame(rows)


def method_category_frame(report: MethodReport) -> pd.DataFrame:
    rows = []
    for method, groups in report.per_category.items():
        for category, metrics in groups.items():
            rows.append({"method": method, "category": category, "mean_score": metrics.mean_score,
                         "e2e_accuracy": metrics.e2e_accuracy, "n": metrics.n})
    return table_frame(rows)


def judge_frame(report: MethodReport) -> pd.DataFrame:
    """Judges as rows, methods as columns, plus a cross-judge average row."""
    frame = pd.DataFrame(report.judges).T
    if not frame.empty:
        frame.loc["average"] = frame.mean(axis=0)
    return frame


def write_methods(out: Path, report: MethodReport) -> Dict[str, Path]:
    paths = {
        "results": write_jsonl(out / "results.jsonl", (r.to_record() for r in report.results)),
        "methods": out / "methods.csv",
        "categories": out / "categories.csv",
        "judges": out / "judges.csv",
        "agreement": out / "agreement.csv",
    }
    method_frame(report).to_csv(paths["methods"], index=False)
    method_category_frame(report).to_csv(paths["categories"], index=False)
    judge_frame(report).to_csv(paths["judges"])
    table_frame([
        {"judge_a": a, "judge_b": b, "pearson": r} for (a, b), r in sorted(report.agreement.items())
    ]).to_csv(paths["agreement"], index=False)
    logger.info(f"Wrote method comparison to {out}")
    return paths


def write_checks(out: Path, checks: List[CheckResult]) -> Path:
    path = out / "checks.csv"
    table_frame([{"check": c.name, "passed": c.passed, "detail": c.detail} for c in checks]).to_csv(path, index=False)
    return path
