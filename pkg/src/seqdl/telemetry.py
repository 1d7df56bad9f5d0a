"""Throughput telemetry: per-stream byte samples and window aggregation.

Streams append timestamped byte deltas to a shared log; the optimizer loop
and report writers aggregate them into mean throughput per window or per
bucket.  Throughput is reported in decimal megabits per second
(1 Mbps = 125,000 bytes/s).  Timestamps are transfer-relative seconds from a
monotonic clock; wall-clock time never enters the log.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable


def bytes_to_mbps(nbytes: int, seconds: float) -> float:
    """Decimal megabits per second for a byte count over a duration."""
    if seconds <= 0:
        raise ValueError("duration must be positive")
    return nbytes * 8.0 / 1e6 / seconds


@dataclass(frozen=True)
class ThroughputSample:
    """One byte-count delta from one stream."""

    timestamp: float
    nbytes: int
    stream_id: int


@dataclass(frozen=True)
class WindowAggregate:
    """Mean throughput over a half-open window [start, end)."""

    start: float
    end: float
    mean_mbps: float
    nbytes: int


@dataclass(frozen=True)
class SeriesRow:
    """One report bucket: start time, mean throughput, active concurrency."""

    t_seconds: float
    mbps: float
    concurrency: int


CSV_HEADER = "t_seconds,mbps,concurrency"


class TelemetryLog:
    """Append-only sample log with snapshot aggregation.

    Multi-producer: each stream records its own deltas; appends take a lock
    only long enough to extend a list, so producers are never stalled by a
    concurrent aggregation (readers copy a snapshot).  Records arriving
    after :meth:`close` are dropped.

    A ``clock`` callable may replace the monotonic default, which lets the
    simulator drive the log in virtual time.
    """

    def __init__(self, clock: Callable[[], float] | None = None) -> None:
        self._lock = threading.Lock()
        self._samples: list[ThroughputSample] = []
        self._statuses: list[tuple[float, int]] = []
        self._closed = False
        if clock is not None:
            self._now = clock
        else:
            t0 = time.monotonic()
            self._now = lambda: time.monotonic() - t0

    def now(self) -> float:
        return self._now()

    def record(self, nbytes: int, stream_id: int) -> None:
        """Append one byte delta stamped with the current clock."""
        self.record_at(self._now(), nbytes, stream_id)

    def record_at(self, timestamp: float, nbytes: int, stream_id: int) -> None:
        if nbytes < 0:
            raise ValueError("byte delta must be >= 0")
        with self._lock:
            if self._closed:
                return
            self._samples.append(ThroughputSample(timestamp, nbytes, stream_id))

    def record_status(self, concurrency: int) -> None:
        """Log a concurrency change for series annotation."""
        self.record_status_at(self._now(), concurrency)

    def record_status_at(self, timestamp: float, concurrency: int) -> None:
        with self._lock:
            if self._closed:
                return
            self._statuses.append((timestamp, concurrency))

    def close(self) -> None:
        with self._lock:
            self._closed = True

    def __len__(self) -> int:
        with self._lock:
            return len(self._samples)

    def snapshot(self) -> list[ThroughputSample]:
        with self._lock:
            return list(self._samples)

    def total_bytes(self) -> int:
        return sum(s.nbytes for s in self.snapshot())

    def duration(self) -> float:
        """Timestamp of the last recorded event, or 0 for an empty log."""
        with self._lock:
            last_sample = self._samples[-1].timestamp if self._samples else 0.0
            last_status = self._statuses[-1][0] if self._statuses else 0.0
        return max(last_sample, last_status)

    def aggregate(self, start: float, end: float) -> WindowAggregate:
        """Mean throughput over exactly [start, end); empty windows score 0."""
        if end <= start:
            raise ValueError("window end must be after start")
        nbytes = sum(
            s.nbytes for s in self.snapshot() if start <= s.timestamp < end
        )
        return WindowAggregate(start, end, bytes_to_mbps(nbytes, end - start), nbytes)

    def concurrency_at(self, t: float) -> int:
        """Concurrency in effect at time t (last status set at or before t)."""
        with self._lock:
            statuses = list(self._statuses)
        level = 0
        for ts, n in statuses:
            if ts <= t:
                level = n
            else:
                break
        return level

    def series(self, bucket: float, end: float | None = None) -> list[SeriesRow]:
        """Contiguous buckets from 0 to the transfer end.

        Each row carries the bucket's mean throughput and the concurrency
        in effect at the bucket start.  An empty log yields an empty series.
        """
        if bucket <= 0:
            raise ValueError("bucket must be positive")
        samples = self.snapshot()
        horizon = end if end is not None else self.duration()
        if not samples and horizon <= 0:
            return []
        # buckets covering [0, horizon]; a sample exactly at the horizon
        # lands in the final bucket
        n_buckets = int(horizon / bucket)
        if horizon - n_buckets * bucket > 1e-12 or n_buckets == 0:
            n_buckets += 1
        totals = [0] * n_buckets
        for s in samples:
            idx = min(int(s.timestamp / bucket), n_buckets - 1)
            totals[idx] += s.nbytes
        rows = []
        for i, nbytes in enumerate(totals):
            t = i * bucket
            rows.append(SeriesRow(t, bytes_to_mbps(nbytes, bucket), self.concurrency_at(t)))
        return rows

    def mean_concurrency(self, end: float | None = None) -> float:
        """Time-weighted mean concurrency over [first status, end]."""
        with self._lock:
            statuses = list(self._statuses)
        if not statuses:
            return 0.0
        horizon = end if end is not None else self.duration()
        weighted = 0.0
        span = 0.0
        for (t, n), (t_next, _) in zip(statuses, statuses[1:] + [(horizon, 0)]):
            dt = max(0.0, min(t_next, horizon) - t)
            weighted += n * dt
            span += dt
        return weighted / span if span > 0 else float(statuses[-1][1])


def write_series_csv(path: str | Path, rows: list[SeriesRow]) -> None:
    """Write report rows as ``t_seconds,mbps,concurrency`` with LF endings."""
    with open(path, "w", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in rows:
            fh.write(f"{row.t_seconds:.6g},{row.mbps:.6f},{row.concurrency}\n")
