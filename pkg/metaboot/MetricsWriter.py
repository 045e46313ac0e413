from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

from .base import Record, Stage

_LOGGER = logging.getLogger("metrics-writer")


class MetricsWriter(Stage):
    """Terminal sink: writes upstream records to a JSONL file.

    The first line is a header record carrying the resolved configuration
    and code version. Records are serialised with sorted keys so that
    identical runs give byte-identical files. Drive it with ``run()``.
    """

    def __init__(self, path: Union[str, Path], header: Optional[Dict[str, Any]] = None,
                 keep: bool = True, on_record: Optional[Callable[[Record], None]] = None) -> None:
        super().__init__()
        self.path = Path(path)
        self.header = header or {}
        self.keep = keep
        self.on_record = on_record
        self.records: List[Record] = []
        self.count = 0

    def run(self) -> int:
        """Drive the pipeline; returns the number of records written."""
        if not self.upstream:
            _LOGGER.warning("MetricsWriter: no upstream")
            return 0

        self.path.parent.mkdir(parents=True, exist_ok=True)
        _LOGGER.info("MetricsWriter: -> %s", self.path)
        with open(self.path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"type": "header", **self.header}, sort_keys=True) + "\n")
            try:
                for rec in self.upstream.stream():
                    if self.cancelled:
                        break
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    self.count += 1
                    if self.keep:
                        self.records.append(rec)
                    if self.on_record is not None:
                        self.on_record(rec)
            finally:
                fh.flush()
                _LOGGER.info("MetricsWriter: %d records -> %s", self.count, self.path)
        return self.count
