from __future__ import annotations

import logging
import math
from typing import Iterator, List, Optional

from .base import NumericError, Record, Stage

_LOGGER = logging.getLogger("nan-guard")


class NanGuard(Stage):
    """Processor: passes metric records through unchanged.

    A diagnostic record (``type = "abort"``) goes downstream, and the stream
    ends with :class:`NumericError`, in two cases: a record has a NaN or
    infinite float field, or the upstream runner itself raised
    :class:`NumericError` (a non-finite loss or statistic).
    """

    def __init__(self) -> None:
        super().__init__()
        self.tripped: bool = False
        self.last_step: Optional[int] = None

    @staticmethod
    def bad_fields(rec: Record) -> List[str]:
        return [k for k, v in rec.items()
                if isinstance(v, float) and not math.isfinite(v)]

    def stream(self) -> Iterator[Record]:
        if not self.upstream:
            return

        records = self.upstream.stream()
        while True:
            try:
                rec = next(records)
            except StopIteration:
                return
            except NumericError as e:
                self.tripped = True
                _LOGGER.error("Upstream aborted at %s after env step %s: %s", e.where, self.last_step, e.detail)
                yield {
                    "type": "abort",
                    "reason": "non-finite value",
                    "site": e.where,
                    "value": e.detail,
                    "env_step": self.last_step,
                }
                self.cancel()
                raise
            if self.cancelled:
                break
            bad = self.bad_fields(rec)
            if bad:
                self.tripped = True
                _LOGGER.error("Non-finite metrics %s at cycle %s", bad, rec.get("cycle"))
                yield {
                    "type": "abort",
                    "reason": "non-finite metric",
                    "site": "metrics",
                    "fields": bad,
                    "env_step": rec.get("env_step"),
                    "record": {k: (repr(v) if k in bad else v) for k, v in rec.items()},
                }
                self.cancel()
                raise NumericError("metrics", ", ".join(bad))
            self.last_step = rec.get("env_step", self.last_step)
            yield rec
