"""Atomic artifact writers.  CSVs may start with ``# key: value`` comment
lines that carry the resolved run config."""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    tmp.replace(path)
    return path


def csv_text(header, rows, comments=()) -> str:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_csv(path, header, rows, comments=()) -> Path:
    return atomic_write_text(path, csv_text(header, rows, comments))


def read_csv(path):
    """Rows as dicts, skipping ``#`` comment lines."""
    with open(path, newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def config_comments(config: dict, seed=None) -> list:
    out = []
    if seed is not None:
        out.append(f"seed: {seed}")
    out.append("config: " + json.dumps(config, sort_keys=True, default=str))
    return out
