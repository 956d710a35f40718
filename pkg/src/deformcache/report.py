"""CSV and JSON-lines reports with a fixed column order.

Floats are written with 9 significant digits, missing values as empty CSV
cells (``null`` in JSON lines), list values as compact JSON. The run
timestamp and config go to a ``<report>.meta.json`` sidecar so the report
body itself is reproducible byte for byte.
"""

from __future__ import annotations

import csv
import datetime
import io
import json
from pathlib import Path

import numpy as np

from .experiment import COLUMNS

FORMATS = ("csv", "jsonl")


def _cell(value):
    if value is None:
        return None
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(format(float(value), ".9g"))
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_cell(v) for v in value]
    return value


def _csv_text(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".9g")
    if isinstance(value, list):
        return json.dumps(value, separators=(",", ":"))
    return str(value)


def render(rows, fmt: str = "csv", columns=COLUMNS) -> str:
    if not rows:
        raise ValueError("cannot write an empty report")
    if fmt not in FORMATS:
        raise ValueError(f"unknown report format {fmt!r}")
    clean = [{c: _cell(r.get(c)) for c in columns} for r in rows]
    if fmt == "jsonl":
        return "".join(json.dumps(r) + "\n" for r in clean)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in clean:
        writer.writerow([_csv_text(r[c]) for c in columns])
    return buf.getvalue()


def emit_report(rows, path, fmt: str = "csv", meta: dict | None = None, columns=COLUMNS) -> Path:
    """Write the report and its ``.meta.json`` sidecar; returns the report path."""
    path = Path(path)
    text = render(rows, fmt, columns)
    path.write_text(text)
    sidecar = {"created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
               "format": fmt, "rows": len(rows), "columns": list(columns)}
    sidecar.update(meta or {})
    Path(str(path) + ".meta.json").write_text(json.dumps(sidecar, indent=2, default=str) + "\n")
    return path


def _parse_csv_cell(text: str):
    if text == "":
        return None
    if text[0] == "[":
        return json.loads(text)
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if text in ("True", "False"):
        return text == "True"
    return text


def load_report(path, fmt: str | None = None) -> list:
    path = Path(path)
    fmt = fmt or ("jsonl" if path.suffix in (".jsonl", ".json") else "csv")
    text = path.read_text()
    if fmt == "jsonl":
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    reader = csv.DictReader(io.StringIO(text))
    return [{k: _parse_csv_cell(v) for k, v in row.items()} for row in reader]


def normalize_rows(rows, columns=COLUMNS) -> list:
    """Rows as they read back after a round trip (9-digit floats, plain types)."""
    return [{c: _cell(r.get(c)) for c in columns} for r in rows]
