from __future__ import annotations

import csv as _csv
import json as _json
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as _np


def code_version() -> str:
    from . import __version__
    return f"metaboot {__version__}"


def to_builtin(value: Any) -> Any:
    """numpy scalars and arrays -> plain Python values for JSON/CSV."""
    if isinstance(value, _np.generic):
        return value.item()
    if isinstance(value, _np.ndarray):
        return value.tolist()
    if isinstance(value, (list, tuple)):
        return [to_builtin(v) for v in value]
    if isinstance(value, dict):
        return {k: to_builtin(v) for k, v in value.items()}
    return value


def dumps(obj: Any) -> str:
    return _json.dumps(to_builtin(obj), sort_keys=True)


def header_lines(config: Mapping[str, Any]) -> List[str]:
    return [f"# {code_version()}", f"# config {dumps(dict(config))}"]


def _cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, float) and math.isnan(value):
        return "nan"
    return to_builtin(value)


def write_csv(path: Path, rows: Iterable[Mapping[str, Any]], columns: Sequence[str],
              comments: Optional[Sequence[str]] = None) -> Path:
    """CSV with optional leading '#' comment lines; unknown keys are dropped."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in comments or ():
            fh.write(line if line.startswith("#") else f"# {line}")
            fh.write("\n")
        writer = _csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k)) for k in columns})
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    """Rows of a CSV written by ``write_csv``, comment lines skipped."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(_csv.DictReader(lines))


def read_jsonl(path: Path) -> List[Dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [_json.loads(ln) for ln in fh if ln.strip()]
