# formatter.py
"""Report serialization: stable JSON documents, long-format CSV tables and run summaries."""
import csv
import io
import json
import math
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

import numpy as np
import structlog

from ..errors import ConfigurationError

logger = structlog.get_logger()

SCHEMA_VERSION = 1
SUMMARY_JSON = "summary.json"
SUMMARY_CSV = "summary.csv"
ROW_FIELDS = ["check", "model", "passed", "metric", "value"]
SUMMARY_FIELDS = ["file", "check", "model", "passed", "headline"]

# Detail keys shown in the summary table, first match wins
HEADLINE_KEYS = ("slope", "sup", "max_rel_err", "left", "mean", "explanation")


def to_jsonable(value):
    """Plain Python types only; non-finite floats become null"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "value") and isinstance(value.value, str):
        return value.value
    return value


def format_json(payload: Dict) -> str:
    """UTF-8 JSON with sorted keys and the schema version stamped in"""
    document = dict(to_jsonable(payload))
    document["schema_version"] = SCHEMA_VERSION
    return json.dumps(document, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def rate_fit_report(fit) -> Dict:
    """Report document for a RateFit whose `extra` names the check and model"""
    extra = dict(fit.extra)
    body = fit.to_dict()
    body["extra"] = {k: v for k, v in extra.items() if k not in ("check", "model", "warnings")}
    return {"check": extra.get("check", "rate_fit"), "model": extra.get("model", ""),
            "passed": bool(fit.passed), "details": body, "warnings": extra.get("warnings", [])}


def _flatten(prefix: str, value) -> Iterable[Tuple[str, object]]:
    if isinstance(value, dict):
        for key in sorted(value):
            yield from _flatten(f"{prefix}.{key}" if prefix else str(key), value[key])
    elif isinstance(value, list):
        for index, item in enumerate(value):
            yield from _flatten(f"{prefix}[{index}]", item)
    else:
        yield prefix, value


def report_rows(report: Dict) -> List[Dict]:
    """One CSV row per scalar leaf of the report details"""
    report = to_jsonable(report)
    return [{"check": report.get("check"), "model": report.get("model"), "passed": report.get("passed"),
             "metric": metric, "value": "" if value is None else value}
            for metric, value in _flatten("", report.get("details", {}))]


def format_csv(rows: List[Dict], fields: List[str]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=fields)
    writer.writeheader()
    writer.writerows(rows)
    return buffer.getvalue()


def write_report(output_dir, name: str, report: Dict) -> Tuple[Path, Path]:
    """Write `name.json` and `name.csv` into output_dir"""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    json_path = output_dir / f"{name}.json"
    csv_path = output_dir / f"{name}.csv"
    json_path.write_text(format_json(report), encoding="utf-8")
    with csv_path.open("w", newline="", encoding="utf-8") as handle:
        handle.write(format_csv(report_rows(report), ROW_FIELDS))
    logger.info("report_written", path=str(json_path), check=report.get("check"), passed=report.get("passed"))
    return json_path, csv_path


def headline(report: Dict):
    details = report.get("details", {})
    for key in HEADLINE_KEYS:
        if key in details:
            return details[key]
    return ""


def collate_reports(directory) -> Dict:
    """
    Gather every report JSON in `directory` into summary.json and summary.csv

    Returns:
        The summary document
    Raises:
        ConfigurationError: The directory is missing or a report is unreadable
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigurationError("directory", f"{directory} is not a directory")
    rows = []
    for path in sorted(directory.glob("*.json")):
        if path.name == SUMMARY_JSON:
            continue
        try:
            report = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigurationError(path.name, f"invalid JSON: {e.msg}", line=e.lineno)
        if "check" not in report:
            logger.debug("report_skipped", path=str(path))
            continue
        rows.append({"file": path.name, "check": report["check"], "model": report.get("model", ""),
                     "passed": bool(report.get("passed")), "headline": headline(report)})
    summary = {"reports": rows, "passed": all(row["passed"] for row in rows), "count": len(rows)}
    (directory / SUMMARY_JSON).write_text(format_json(summary), encoding="utf-8")
    with (directory / SUMMARY_CSV).open("w", newline="", encoding="utf-8") as handle:
        handle.write(format_csv([{k: ("" if v is None else v) for k, v in row.items()} for row in rows],
                                SUMMARY_FIELDS))
    logger.info("reports_collated", directory=str(directory), count=len(rows), passed=summary["passed"])
    return summary
