"""JSON schemas for every emitted table and record stream, plus validators.

CSV cells are strings on disk; ``validate_csv`` coerces each column with the
type named in the schema before validating the row.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import jsonschema

_num = {"type": ["number", "null"]}
_rate = {"type": ["number", "null"], "minimum": 0.0, "maximum": 1.0}
_nll = {"type": ["number", "null"], "minimum": 0.0}

RUN_RECORD = {
    "type": "object",
    "required": ["step", "epoch", "forget_nll", "retain_nll", "forget_em", "retain_em", "kl_drift", "token_updates", "wall_clock"],
    "properties": {
        "variant": {"type": "string"},
        "seed": {"type": "integer"},
        "step": {"type": "integer", "minimum": 0},
        "epoch": {"type": "integer", "minimum": 0},
        "forget_nll": _nll,
        "retain_nll": _nll,
        "forget_em": _rate,
        "retain_em": _rate,
        "kl_drift": {"type": ["number", "null"], "minimum": 0.0},
        "token_updates": {"type": "integer", "minimum": 0},
        "wall_clock": {"type": "number", "minimum": 0.0},
    },
}

SAMPLE_RECORD = {
    "type": "object",
    "required": ["schema_version", "entity_id", "split", "ids", "answer_start", "knowledge_slots", "answer_knowledge_positions"],
    "properties": {
        "schema_version": {"const": 1},
        "entity_id": {"type": "integer", "minimum": 0},
        "split": {"enum": ["forget", "retain"]},
        "attribute": {"type": "string"},
        "ids": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2},
        "answer_start": {"type": "integer", "minimum": 2},
        "knowledge_slots": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "answer_knowledge_positions": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
    },
}

PROFILE_RECORD = {
    "type": "object",
    "required": ["positions", "delta", "entropy", "phi", "alpha"],
    "properties": {
        "positions": {"type": "array", "items": {"type": "integer", "minimum": 2}},
        "delta": {"type": "array", "items": {"type": "number", "minimum": 0.0}},
        "entropy": {"type": "array", "items": {"type": "number", "minimum": 0.0}},
        "phi": {"type": "array", "items": {"type": "number", "minimum": 0.0}},
        "alpha": {"type": "number", "minimum": 0.0, "maximum": 1.0},
    },
}

TABLE_ROW = {
    "type": "object",
    "required": ["variant", "method", "weighting", "seed", "status", "steps", "forget_em", "retain_em", "forget_nll", "retain_nll", "kl_drift"],
    "properties": {
        "variant": {"type": "string", "pattern": "^([TS]-)?(GA|WGA|NPO|RMU)$"},
        "method": {"enum": ["GA", "WGA", "NPO", "RMU"]},
        "weighting": {"enum": ["uniform", "hard", "soft"]},
        "seed": {"type": "integer"},
        "status": {"enum": ["ok", "aborted", "failed"]},
        "steps": {"type": ["integer", "null"], "minimum": 0},
        "r": _num,
        "alpha": _num,
        "lam": _num,
        "forget_em": _rate,
        "retain_em": _rate,
        "forget_nll": _nll,
        "retain_nll": _nll,
        "kl_drift": {"type": ["number", "null"], "minimum": 0.0},
        "forget_nll_before": _nll,
        "error": {"type": "string"},
    },
}

SUMMARY_ROW = {
    "type": "object",
    "required": ["variant", "n", "forget_em_mean", "forget_em_std", "retain_em_mean", "retain_em_std"],
    "properties": {
        "variant": {"type": "string"},
        "n": {"type": "integer", "minimum": 0},
        "forget_em_mean": _rate,
        "forget_em_std": _num,
        "retain_em_mean": _rate,
        "retain_em_std": _num,
        "forget_nll_mean": _nll,
        "forget_nll_std": _num,
        "retain_nll_mean": _nll,
        "retain_nll_std": _num,
        "kl_drift_mean": _nll,
        "kl_drift_std": _num,
    },
}

SNR_ROW = {
    "type": "object",
    "required": ["kind", "T", "rho", "r", "lhs", "rhs", "snr_token", "snr_seq", "ratio", "predicted", "holds"],
    "properties": {
        "kind": {"enum": ["bound", "ratio", "slope"]},
        "T": {"type": "integer", "minimum": 2},
        "rho": {"type": "number", "minimum": 0.0, "maximum": 1.0},
        "r": _num,
        "n_critical": {"type": ["integer", "null"], "minimum": 1},
        "lhs": _num,
        "rhs": _num,
        "snr_token": _num,
        "snr_seq": _num,
        "ratio": _num,
        "predicted": _num,
        "holds": {"type": ["boolean", "null"]},
    },
}

ABLATION_ROW = {
    "type": "object",
    "required": ["axis", "value", "variant", "forget_em_mean", "retain_em_mean"],
    "properties": {
        "axis": {"enum": ["r", "alpha"]},
        "value": {"type": "number"},
        "variant": {"type": "string"},
        "forget_em_mean": _rate,
        "retain_em_mean": _rate,
    },
}


def _coerce(value: str, spec: dict):
    types = spec.get("type", [])
    types = [types] if isinstance(types, str) else list(types)
    if "enum" in spec and not types:
        return value
    if value == "":
        return None if "null" in types else value
    if value in ("True", "False") and "boolean" in types:
        return value == "True"
    if "integer" in types:
        try:
            return int(value)
        except ValueError:
            pass
    if "number" in types:
        try:
            return float(value)
        except ValueError:
            pass
    return value


def validate_records(records, schema: dict) -> None:
    for i, rec in enumerate(records, 1):
        try:
            jsonschema.validate(rec, schema)
        except jsonschema.ValidationError as exc:
            raise ValueError(f"record {i}: {exc.message}") from exc


def validate_jsonl(path, schema: dict) -> int:
    """Validate every line of a JSON-lines file; returns the record count."""
    n = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                jsonschema.validate(json.loads(line), schema)
            except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
                msg = getattr(exc, "message", str(exc))
                raise ValueError(f"{path}:{lineno}: {msg}") from exc
            n += 1
    return n


def read_csv(path, schema: dict) -> list[dict]:
    props = schema.get("properties", {})
    with open(path, newline="") as fh:
        return [{k: _coerce(v, props.get(k, {})) for k, v in row.items()} for row in csv.DictReader(fh)]


def validate_csv(path, schema: dict) -> int:
    rows = read_csv(path, schema)
    for i, row in enumerate(rows, 2):
        try:
            jsonschema.validate(row, schema)
        except jsonschema.ValidationError as exc:
            raise ValueError(f"{path}:{i}: {exc.message}") from exc
    return len(rows)


def write_csv(path, rows: list[dict], schema: dict, columns: list[str] | None = None) -> Path:
    """Validate then write ``rows``; ``None`` becomes an empty cell."""
    validate_records(rows, schema)
    cols = columns or list(dict.fromkeys(k for r in rows for k in r))
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in cols})
    return path
