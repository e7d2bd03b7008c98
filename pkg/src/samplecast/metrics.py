"""Run metrics: per-stream / per-receiver counters and CSV emission.

CSV columns are fixed and versioned; rows are a pure function of
(scenario config, seed) so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

CSV_VERSION = 1

# Fixed metric column order (after scenario_id, seed and any swept
# parameter columns).
METRIC_COLUMNS = [
    "stream",
    "reader",
    "generated",
    "dropped_at_source",
    "delivered",
    "missed",
    "delivery_rate",
    "latency_mean_us",
    "latency_max_us",
    "latency_hist",
    "frags_sent_initial",
    "frags_sent_retx",
    "frags_received",
    "pdr",
    "heartbeats_sent",
    "nacks_sent",
    "nacks_ignored",
    "protocol_violations",
    "handover_count",
    "downtime_max_us",
    "downtime_mean_us",
    "reconfig_committed",
    "reconfig_aborted",
    "fail_silent_events",
]

LATENCY_BUCKET_US = 1000


@dataclass
class WriterStats:
    """Writer-side per-stream counters."""

    generated: int = 0
    dropped_at_source: int = 0
    frags_sent_initial: int = 0
    frags_sent_retx: int = 0
    heartbeats_sent: int = 0
    nacks_received: int = 0
    nacks_ignored: int = 0
    protocol_violations: int = 0


@dataclass
class ReaderStats:
    """Receiver-side counters for one (stream, reader) pair."""

    delivered: int = 0
    missed_observed: int = 0
    frags_received: int = 0
    duplicates: int = 0
    nacks_sent: int = 0
    protocol_violations: int = 0
    latencies_us: list = field(default_factory=list)

    def record_delivery(self, latency_us: int) -> None:
        self.delivered += 1
        self.latencies_us.append(latency_us)


@dataclass
class RunStats:
    """Whole-run control-plane and handover outcomes."""

    handover_downtimes_us: list = field(default_factory=list)
    reconfig_committed: int = 0
    reconfig_aborted: int = 0
    fail_silent_events: int = 0
    mode_violations: int = 0


def latency_histogram(latencies_us, bucket_us: int = LATENCY_BUCKET_US) -> str:
    """Encode latencies as 'bucket_lo:count' pairs, ascending, ';'-joined."""
    buckets: dict[int, int] = {}
    for lat in latencies_us:
        lo = (lat // bucket_us) * bucket_us
        buckets[lo] = buckets.get(lo, 0) + 1
    return ";".join("%d:%d" % (lo, buckets[lo]) for lo in sorted(buckets))


def stream_rows(
    scenario_id: str,
    seed: int,
    param_values: dict,
    stream_id: str,
    writer: WriterStats,
    readers: dict[str, "ReaderStats"],
    links: dict[str, tuple[int, int]],
    run: RunStats,
) -> list[dict]:
    """One CSV row per (stream, reader). links maps reader -> (sent, delivered)."""
    rows = []
    downtimes = run.handover_downtimes_us
    for reader_id in sorted(readers):
        rs = readers[reader_id]
        missed = writer.generated - writer.dropped_at_source - rs.delivered
        lats = rs.latencies_us
        sent, delivered = links.get(reader_id, (0, 0))
        row = {"scenario_id": scenario_id, "seed": seed}
        row.update(param_values)
        row.update(
            {
                "stream": stream_id,
                "reader": reader_id,
                "generated": writer.generated,
                "dropped_at_source": writer.dropped_at_source,
                "delivered": rs.delivered,
                "missed": missed,
                "delivery_rate": _ratio(rs.delivered, writer.generated),
                "latency_mean_us": (
                    "%.1f" % (sum(lats) / len(lats)) if lats else ""
                ),
                "latency_max_us": max(lats) if lats else "",
                "latency_hist": latency_histogram(lats),
                "frags_sent_initial": writer.frags_sent_initial,
                "frags_sent_retx": writer.frags_sent_retx,
                "frags_received": rs.frags_received,
                "pdr": _ratio(delivered, sent),
                "heartbeats_sent": writer.heartbeats_sent,
                "nacks_sent": rs.nacks_sent,
                "nacks_ignored": writer.nacks_ignored,
                "protocol_violations": writer.protocol_violations
                + rs.protocol_violations,
                "handover_count": len(downtimes),
                "downtime_max_us": max(downtimes) if downtimes else "",
                "downtime_mean_us": (
                    "%.1f" % (sum(downtimes) / len(downtimes)) if downtimes else ""
                ),
                "reconfig_committed": run.reconfig_committed,
                "reconfig_aborted": run.reconfig_aborted,
                "fail_silent_events": run.fail_silent_events,
            }
        )
        rows.append(row)
    return rows


def _ratio(num: int, den: int) -> str:
    if den == 0:
        return ""
    return "%.6f" % (num / den)


def rows_to_csv(rows: list[dict], param_columns: list[str]) -> str:
    """Serialize rows with the fixed, versioned column layout."""
    columns = ["scenario_id", "seed"] + list(param_columns) + METRIC_COLUMNS
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({col: row.get(col, "") for col in columns})
    return buf.getvalue()
