from __future__ import annotations

import logging
from typing import Any, Dict, Iterator, Optional, Sequence, Tuple
from uuid import uuid4

_LOGGER = logging.getLogger("stage")

Record = Dict[str, Any]


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible input shapes."""

    def __init__(self, op: str, shapes: Sequence[Tuple[int, ...]], detail: str = "") -> None:
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " and ".join(str(s) for s in self.shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg = f"{msg} ({detail})"
        super().__init__(msg)


class NumericError(ArithmeticError):
    """Raised when a NaN/inf shows up where a finite value is required."""

    def __init__(self, where: str, detail: str = "") -> None:
        self.where = where
        self.detail = detail
        super().__init__(f"{where}: non-finite value{': ' + detail if detail else ''}")


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str) -> None:
        self.field = field
        super().__init__(f"{field}: {message}")


class DegenerateProblem(ValueError):
    pass


class Stage:
    """One element of a metric-record pipeline.

    A record is a flat dict: one meta-cycle of a two-colors run, one
    meta-step of a multi-task run, or an abort diagnostic. A run is always
    ``runner -> NanGuard -> MetricsWriter``: the runner yields records from
    ``stream()``, NanGuard re-yields them, and the writer pulls the chain
    with ``run()``. Records are produced lazily, one cycle per ``next()``.
    """

    def __init__(self) -> None:
        self.id: str = uuid4().hex[:8]
        self.upstream: Optional[Stage] = None
        self.downstream: Optional[Stage] = None
        self.cancelled: bool = False

    def set_upstream(self, up: Stage) -> Stage:
        self.upstream = up
        up.downstream = self
        return self

    def pipe(self, next_stage: Stage) -> Stage:
        """Connect this stage to next_stage and return next_stage."""
        return next_stage.set_upstream(self)

    def cancel(self) -> None:
        """Stop the whole chain; runners check ``cancelled`` between cycles."""
        if self.cancelled:
            return
        self.cancelled = True
        try:
            if self.upstream:
                self.upstream.cancel()
        except Exception:
            pass
        try:
            if self.downstream:
                self.downstream.cancel()
        except Exception:
            pass

    def stream(self) -> Iterator[Record]:
        """Yield metric records in env-step order. The base stage yields none."""
        return iter(())
