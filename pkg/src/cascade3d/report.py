"""Delimited-text tables with a leading config echo line."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Iterable, Sequence

DELIMITER = "\t"


def fmt(v: Any) -> str:
    if v is None:
        return "no-GT"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def config_echo(config: dict) -> str:
    return "# config " + json.dumps(config, sort_keys=True, default=str)


def write_table(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]], config: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(config_echo(config) + "\n")
        w = csv.writer(fh, delimiter=DELIMITER, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])
    return path


def read_table(path: Path) -> tuple[dict, list[dict[str, str]]]:
    """Inverse of :func:`write_table`: (config, rows as dicts of strings)."""
    with open(path) as fh:
        first = fh.readline()
        cfg = json.loads(first[len("# config "):]) if first.startswith("# config ") else {}
        return cfg, list(csv.DictReader(fh, delimiter=DELIMITER))
