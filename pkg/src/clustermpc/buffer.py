"""FIFO accumulation of scenario solve records across control periods.

The buffer stores whole batches (one batch per control period, nominally
N_n records each) and evicts the oldest whole batch once more than q
batches are present.  During warm-up fewer batches simply mean a smaller
snapshot; eviction granularity is always a full batch.

Records whose solver did not converge are dropped at insertion: their
(u*, J*, g*) labels would poison the clustering.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

from .solver import SolveRecord


class BufferNotReady(RuntimeError):
    """Snapshot requested from an empty buffer."""


class BadBatch(ValueError):
    """Batch rejected at insertion (wrong size or inconsistent record)."""


class FifoBuffer:
    def __init__(self, batch_size: int, max_batches: int,
                 record_check: Optional[Callable[[SolveRecord], bool]] = None):
        if batch_size < 1 or max_batches < 1:
            raise ValueError("batch_size and max_batches must be positive")
        self.batch_size = batch_size
        self.max_batches = max_batches
        self._record_check = record_check
        self._batches: list[tuple[SolveRecord, ...]] = []

    @property
    def capacity(self) -> int:
        return self.batch_size * self.max_batches

    def __len__(self) -> int:
        return sum(len(b) for b in self._batches)

    @property
    def n_batches(self) -> int:
        return len(self._batches)

    def insert_batch(self, batch: Sequence[SolveRecord]) -> "FifoBuffer":
        """Append one period's records, evicting the oldest batch at capacity."""
        if len(batch) != self.batch_size:
            raise BadBatch(f"expected a batch of {self.batch_size} records, got {len(batch)}")
        if self._record_check is not None:
            for rec in batch:
                if not self._record_check(rec):
                    raise BadBatch(f"record from step {rec.origin_step} failed the insertion check")
        kept = tuple(rec for rec in batch if rec.converged)
        self._batches.append(kept)
        if len(self._batches) > self.max_batches:
            self._batches.pop(0)
        return self

    def snapshot(self) -> tuple[SolveRecord, ...]:
        """Immutable copy of the stored records, oldest first."""
        if not self._batches:
            raise BufferNotReady("buffer is empty")
        return tuple(rec for batch in self._batches for rec in batch)

    def dump(self, path) -> None:
        """Write one line per record: 13 w values, the flattened control
        sequence, J*, g* and the origin step, as decimal text."""
        with open(path, "w", encoding="utf-8") as fh:
            for batch in self._batches:
                for rec in batch:
                    fields = [repr(float(v)) for v in rec.w]
                    fields += [repr(float(v)) for v in rec.u_star.ravel()]
                    fields += [repr(float(rec.J_star)), repr(float(rec.g_star)), str(int(rec.origin_step))]
                    fh.write(" ".join(fields) + "\n")
