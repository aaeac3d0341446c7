"""Run reports: schema, hashing, serialization and table rendering."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import jsonschema
import numpy as np

from .errors import MissingFieldError

REPORT_SCHEMA_VERSION = 1
REPORT_NAME = "report.json"
WALL_CLOCK_FIELD = "wall_clock_seconds"

_METRICS = {
    "type": "object",
    "required": ["nmi", "ari", "acc"],
    "properties": {m: {"type": "number"} for m in ("nmi", "ari", "acc")},
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "kind", "model_id", "dataset", "config", "artifacts",
                 "warnings", WALL_CLOCK_FIELD],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "kind": {"enum": ["train", "attack", "sweep", "transfer", "defend", "serve",
                          "attack-mlaas", "report"]},
        "model_id": {"type": "string"},
        "dataset": {"type": "string"},
        "config": {"type": "object"},
        "pre": _METRICS,
        "post": _METRICS,
        "ledger": {
            "type": "object",
            "required": ["batch_size", "batch_queries", "training_batches", "cache_hits", "converged"],
        },
        "delta_stats": {
            "type": "object",
            "required": ["mean", "max", "histogram"],
        },
        "artifacts": {"type": "object", "additionalProperties": {"type": "string"}},
        "warnings": {"type": "array", "items": {"type": "string"}},
        WALL_CLOCK_FIELD: {"type": "number"},
    },
}


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def delta_stats(norms, bins: int = 10) -> dict:
    norms = np.asarray(norms, dtype=np.float64)
    counts, edges = np.histogram(norms, bins=bins)
    return {"mean": float(norms.mean()), "max": float(norms.max()),
            "histogram": {"edges": edges.tolist(), "counts": counts.tolist()}}


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, Path):
        return str(value)
    return value


def validate_report(doc: dict) -> None:
    jsonschema.validate(doc, REPORT_SCHEMA)


def write_report(doc: dict, out_dir) -> Path:
    """Validate and write ``report.json`` with stable key order."""
    doc = _jsonable(doc)
    validate_report(doc)
    path = Path(out_dir) / REPORT_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_report(path) -> dict:
    doc = json.loads(Path(path).read_text())
    validate_report(doc)
    return doc


def strip_wall_clock(text: str) -> str:
    """Report text without its wall-clock line, for byte-level comparisons."""
    return "\n".join(line for line in text.splitlines() if f'"{WALL_CLOCK_FIELD}"' not in line)


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise MissingFieldError(key, where)
    return doc[key]


def render_tables(report_dir) -> list[Path]:
    """Write metric, query-complexity and transferability CSVs for every report under ``report_dir``."""
    root = Path(report_dir)
    paths = sorted(root.rglob(REPORT_NAME))
    if not paths:
        raise FileNotFoundError(f"no {REPORT_NAME} found under {root}")
    docs = [(p, load_report(p)) for p in paths]
    written = []

    metric_rows, query_rows = [], []
    for path, doc in docs:
        if "pre" in doc or "post" in doc:
            pre = _require(doc, "pre", str(path))
            post = doc.get("post") or {}
            metric_rows.append([doc["model_id"], doc["dataset"], doc["kind"],
                                *[pre[m] for m in ("nmi", "ari", "acc")],
                                *[post.get(m, "") for m in ("nmi", "ari", "acc")]])
        if "ledger" in doc:
            ledger = doc["ledger"]
            eps = _require(doc["config"], "epsilon", str(path))
            query_rows.append([doc["model_id"], doc["dataset"], eps,
                               *[_require(ledger, k, str(path)) for k in
                                 ("batch_size", "batch_queries", "training_batches", "cache_hits",
                                  "converged")]])
        for point in doc.get("sweep", []):
            query_rows.append([doc["model_id"], doc["dataset"], point["epsilon"],
                               *[point["ledger"][k] for k in
                                 ("batch_size", "batch_queries", "training_batches", "cache_hits",
                                  "converged")]])

    def write(name, header, rows):
        out = root / name
        with open(out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(sorted(rows, key=lambda r: tuple(str(v) for v in r[:3])))
        written.append(out)

    write("metrics_table.csv", ["model_id", "dataset", "kind", "pre_nmi", "pre_ari", "pre_acc",
                                "post_nmi", "post_ari", "post_acc"], metric_rows)
    write("query_table.csv", ["model_id", "dataset", "epsilon", "batch_size", "batch_queries",
                              "training_batches", "cache_hits", "converged"], query_rows)

    for path, doc in docs:
        if doc["kind"] != "transfer":
            continue
        matrix = _require(doc, "transfer", str(path))
        ids = _require(matrix, "sources", str(path))
        for metric, table in _require(matrix, "post_attack", str(path)).items():
            out = root / f"transfer_{doc['model_id']}_{metric}.csv"
            with open(out, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["source\\target", *matrix["targets"]])
                for sid, row in zip(ids, table):
                    writer.writerow([sid, *["skipped" if v is None else v for v in row]])
            written.append(out)
    return written
