"""Packet-level BEC comparison protocol.

Every fragment is acknowledged individually and retried at most `k`
times after an ACK timeout. There is no heartbeat, no NACK and no use
of sample deadline information anywhere in the sending logic; deadlines
only matter to the receiver-side delivery accounting, which mirrors the
sample-aware transport so the two protocols are measured identically.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .engine import Engine
from .metrics import ReaderStats, WriterStats
from .stream import ACK_BYTES, StreamConfig, fragment_payload
from .transport import DataFrag


@dataclass(frozen=True)
class AckBatch:
    """Per-packet ACKs that happened to arrive in the same slot.

    keys are (sample_seq, frag_index) pairs; occupancy is charged as one
    ACK message per packet.
    """

    keys: tuple

    @property
    def frame_bytes(self) -> int:
        return ACK_BYTES * len(self.keys)


class _BaselineSample:
    __slots__ = ("seq", "frags", "total", "t_gen", "t_deadline")

    def __init__(self, seq, frags, t_gen, t_deadline):
        self.seq = seq
        self.frags = frags
        self.total = len(frags)
        self.t_gen = t_gen
        self.t_deadline = t_deadline


class BaselineWriter:
    """Send-and-await-ACK sender with a fixed per-fragment retry limit."""

    def __init__(
        self,
        engine: Engine,
        cfg: StreamConfig,
        stream_id: str,
        downlink,
        stats: WriterStats | None = None,
        retry_limit: int = 1,
        ack_timeout_us: int | None = None,
    ):
        self.engine = engine
        self.cfg = cfg
        self.stream_id = stream_id
        self.downlink = downlink
        self.stats = stats if stats is not None else WriterStats()
        self.retry_limit = retry_limit
        self.ack_timeout_us = (
            ack_timeout_us if ack_timeout_us is not None else 4 * cfg.arbitration_us
        )
        self.queue: deque = deque()  # (rec, idx) FIFO; retries rejoin at the front
        self.attempts: dict = {}  # (seq, idx) -> attempts used so far
        self.awaiting: dict = {}  # (seq, idx) -> (attempt, rec)
        self.timeouts: deque = deque()  # (ack_deadline, (seq, idx), attempt)
        self.driver = None
        self.enabled = True
        self.slot_budget = cfg.slot_budget
        self.mode_id = 0
        self.transmit_audit = None
        self.gave_up = 0

    def on_new_sample(self, sample, now: int | None = None) -> None:
        now = self.engine.now if now is None else now
        self.stats.generated += 1
        if sample.t_deadline <= now:
            self.stats.dropped_at_source += 1
            return
        frags = fragment_payload(
            sample.stream_id,
            sample.seq,
            sample.size,
            self.cfg.fragment_size,
            sample.payload,
        )
        rec = _BaselineSample(sample.seq, frags, sample.t_gen, sample.t_deadline)
        for i in range(rec.total):
            self.queue.append((rec, i))
        if self.driver is not None:
            self.driver.wake()

    def sendable_count(self) -> int:
        if not self.enabled:
            return 0
        # Timed-out fragments become sendable on a later tick; count them
        # so the driver does not sleep through pending retries.
        return len(self.queue) + len(self.timeouts)

    def earliest_deadline(self):
        if self.queue:
            return self.queue[0][0].t_deadline
        return None

    def _expire_timeouts(self, now: int) -> None:
        while self.timeouts and self.timeouts[0][0] <= now:
            _, key, attempt = self.timeouts.popleft()
            entry = self.awaiting.get(key)
            if entry is None or entry[0] != attempt:
                continue  # ACKed or superseded in the meantime
            rec = entry[1]
            del self.awaiting[key]
            if self.attempts[key] <= self.retry_limit:
                self.queue.appendleft((rec, key[1]))  # MAC-style prompt retry
            else:
                self.gave_up += 1

    def emit(self, budget: int, now: int) -> int:
        self._expire_timeouts(now)
        if budget <= 0 or not self.queue:
            return 0
        batch = []
        sent = 0
        while sent < budget and self.queue:
            rec, idx = self.queue.popleft()
            key = (rec.seq, idx)
            attempt = self.attempts.get(key, 0) + 1
            self.attempts[key] = attempt
            self.awaiting[key] = (attempt, rec)
            self.timeouts.append((now + self.ack_timeout_us, key, attempt))
            batch.append(DataFrag(rec.frags[idx], rec.t_gen, rec.t_deadline, self.mode_id))
            if attempt == 1:
                self.stats.frags_sent_initial += 1
            else:
                self.stats.frags_sent_retx += 1
            sent += 1
        if batch:
            if self.transmit_audit is not None:
                self.transmit_audit(now, self.mode_id, len(batch))
            self.downlink.send_fragments(batch, now)
        return sent

    def on_acks(self, acks: AckBatch) -> None:
        for key in acks.keys:
            self.awaiting.pop(key, None)


class BaselineReader:
    """Receives fragments, ACKs every arrival, delivers complete samples."""

    def __init__(
        self,
        engine: Engine,
        stream_id: str,
        reader_id: str,
        uplink,
        stats: ReaderStats | None = None,
    ):
        self.engine = engine
        self.stream_id = stream_id
        self.reader_id = reader_id
        self.uplink = uplink
        self.stats = stats if stats is not None else ReaderStats()
        self.samples: dict = {}

    def on_fragments(self, batch: list[DataFrag]) -> None:
        now = self.engine.now
        ack_keys = []
        for df in batch:
            frag = df.fragment
            seq = frag.sample_seq
            # ACK even duplicates and post-deadline arrivals: the sender
            # must stop retrying regardless.
            ack_keys.append((seq, frag.frag_index))
            st = self.samples.get(seq)
            if st is None:
                if now >= df.t_deadline:
                    continue
                st = {
                    "bitmap": 0,
                    "total": frag.total_frags,
                    "t_gen": df.t_gen,
                    "t_deadline": df.t_deadline,
                    "delivered": False,
                }
                self.samples[seq] = st
                self.engine.schedule_at(df.t_deadline, self._cleanup, seq)
            if st["delivered"] or now >= st["t_deadline"]:
                continue
            bit = 1 << frag.frag_index
            if st["bitmap"] & bit:
                self.stats.duplicates += 1
                continue
            st["bitmap"] |= bit
            self.stats.frags_received += 1
            if st["bitmap"] == (1 << st["total"]) - 1:
                st["delivered"] = True
                self.stats.record_delivery(now - st["t_gen"])
        if ack_keys:
            self.uplink.send_acks(AckBatch(tuple(ack_keys)), now)

    def _cleanup(self, seq: int) -> None:
        st = self.samples.pop(seq, None)
        if st is not None and not st["delivered"]:
            self.stats.missed_observed += 1


class BaselineDownlink:
    def __init__(self, engine: Engine, link, reader, tx_time_us: int = 0):
        self.engine = engine
        self.link = link
        self.reader = reader
        self.tx_time_us = tx_time_us

    def send_fragments(self, batch: list[DataFrag], now: int) -> None:
        link = self.link
        survivors = [df for df in batch if link.try_send(df.frame_bytes)]
        if survivors:
            self.engine.schedule_in(
                self.tx_time_us + link.latency_us, self.reader.on_fragments, survivors
            )


class BaselineUplink:
    def __init__(self, engine: Engine, link, writer, control_lossless=False):
        self.engine = engine
        self.link = link
        self.writer = writer
        self.control_lossless = control_lossless

    def send_acks(self, acks: AckBatch, now: int) -> None:
        if self.link.try_send(acks.frame_bytes, bypass_loss=self.control_lossless):
            self.engine.schedule_in(self.link.latency_us, self.writer.on_acks, acks)
