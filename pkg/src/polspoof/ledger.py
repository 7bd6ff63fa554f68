"""Cost accounting shared by the prover, the verifier and the attacks.

A gradient computation is the unit of cost. Plain SGD updates cost one; an
adversarial-optimization iteration costs three (the perturbed-batch weight
gradient, the second-order pass back to the inputs, and the follow-up update).
"""

from __future__ import annotations

import contextlib
import contextvars
import threading
import time
from dataclasses import dataclass, field

OPT_ITERATION_COST = 3

_active: contextvars.ContextVar[CostLedger | None] = contextvars.ContextVar(
    "polspoof_active_ledger", default=None
)


@dataclass
class CostLedger:
    updates: int = 0
    opt_iterations: int = 0
    wall_time: float = 0.0
    bytes_written: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def gradient_computations(self) -> int:
        return self.updates + OPT_ITERATION_COST * self.opt_iterations

    def add_updates(self, n: int = 1) -> None:
        if n < 0:
            raise ValueError("ledger counters are monotone")
        with self._lock:
            self.updates += n

    def add_opt_iterations(self, n: int = 1) -> None:
        if n < 0:
            raise ValueError("ledger counters are monotone")
        with self._lock:
            self.opt_iterations += n

    def add_bytes(self, n: int) -> None:
        with self._lock:
            self.bytes_written += n

    def add_time(self, seconds: float) -> None:
        with self._lock:
            self.wall_time += seconds

    def merge(self, other: CostLedger) -> None:
        with self._lock:
            self.updates += other.updates
            self.opt_iterations += other.opt_iterations
            self.wall_time += other.wall_time
            self.bytes_written += other.bytes_written

    @contextlib.contextmanager
    def activate(self):
        """Make this the ledger charged by calls that are not given one explicitly."""
        token = _active.set(self)
        start = time.perf_counter()
        try:
            yield self
        finally:
            self.add_time(time.perf_counter() - start)
            _active.reset(token)

    def to_dict(self) -> dict:
        return {
            "gradient_computations": self.gradient_computations,
            "updates": self.updates,
            "opt_iterations": self.opt_iterations,
            "wall_time": self.wall_time,
            "bytes_written": self.bytes_written,
        }

    @classmethod
    def from_dict(cls, d: dict) -> CostLedger:
        return cls(
            updates=int(d["updates"]),
            opt_iterations=int(d["opt_iterations"]),
            wall_time=float(d.get("wall_time", 0.0)),
            bytes_written=int(d.get("bytes_written", 0)),
        )


def resolve(ledger: CostLedger | None) -> CostLedger | None:
    """Explicit ledger wins; otherwise the one activated in this context, if any."""
    return ledger if ledger is not None else _active.get()
