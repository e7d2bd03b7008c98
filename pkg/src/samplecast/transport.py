"""Deadline-aware reliable sample transport: writer/reader state machines.

The writer paces fragments on an arbitration-slot grid, announces
outstanding samples with heartbeats once the initial pass is done, and
reschedules exactly the fragments a NACK reports missing. Samples past
their deadline are garbage-collected on both sides; no message about a
sample fires after its cleanup.

Handlers are pure event callbacks serialized by the engine; there is no
internal threading.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .channel import Link
from .engine import Engine
from .metrics import ReaderStats, WriterStats
from .stream import (
    FRAGMENT_HEADER_BYTES,
    HEARTBEAT_BYTES,
    NACK_BASE_BYTES,
    Fragment,
    StreamConfig,
    fragment_payload,
    mask_to_indices,
)


def residual_failure_prob(n_frags: int, p_loss: float, attempts_per_frag: int) -> float:
    """Probability a sample misses its deadline on an i.i.d. channel when
    every fragment gets exactly `attempts_per_frag` independent tries."""
    if n_frags <= 0 or attempts_per_frag <= 0:
        raise ValueError("n_frags and attempts_per_frag must be positive")
    if not 0.0 <= p_loss <= 1.0:
        raise ValueError("p_loss must lie in [0, 1]")
    return 1.0 - (1.0 - p_loss**attempts_per_frag) ** n_frags


def required_attempts(
    n_frags: int, p_loss: float, target: float, max_attempts: int = 64
) -> int:
    """Smallest per-fragment attempt count meeting the residual target."""
    for r in range(1, max_attempts + 1):
        if residual_failure_prob(n_frags, p_loss, r) <= target:
            return r
    raise ValueError(
        "no attempt count up to %d meets target %g at p=%g"
        % (max_attempts, target, p_loss)
    )


@dataclass(frozen=True)
class DataFrag:
    fragment: Fragment
    t_gen: int
    t_deadline: int
    mode_id: int = 0

    @property
    def frame_bytes(self) -> int:
        return FRAGMENT_HEADER_BYTES + self.fragment.length


@dataclass(frozen=True)
class Heartbeat:
    stream_id: str
    sample_seq: int
    total_frags: int
    t_gen: int
    t_deadline: int
    writer_time: int

    frame_bytes = HEARTBEAT_BYTES


@dataclass(frozen=True)
class Nack:
    stream_id: str
    sample_seq: int
    missing_mask: int
    total_frags: int
    reader_id: str = ""
    # Echo of the triggering heartbeat's writer_time: lets the writer skip
    # fragments it (re)transmitted after the reader's bitmap snapshot, so
    # in-flight repairs are not duplicated.
    hb_time: int = -1

    @property
    def frame_bytes(self) -> int:
        return NACK_BASE_BYTES + math.ceil(self.total_frags / 8)


class _SampleTx:
    """Writer-side bookkeeping for one pending sample."""

    __slots__ = (
        "seq",
        "frags",
        "total",
        "full_mask",
        "t_gen",
        "t_deadline",
        "unacked_mask",
        "next_initial",
        "retx_mask",
        "last_activity",
        "last_tx",
        "hb_event",
        "deadline_event",
    )

    def __init__(self, seq, frags, t_gen, t_deadline, now):
        self.seq = seq
        self.frags = frags
        self.total = len(frags)
        self.full_mask = (1 << self.total) - 1
        self.t_gen = t_gen
        self.t_deadline = t_deadline
        self.unacked_mask = self.full_mask
        self.next_initial = 0
        self.retx_mask = 0
        self.last_activity = now
        self.last_tx = [-1] * self.total
        self.hb_event = None
        self.deadline_event = None

    def stale_tx_mask(self, hb_time: int) -> int:
        """Fragments transmitted after the given heartbeat snapshot; a NACK
        answering that heartbeat cannot have seen them."""
        if hb_time < 0:
            return 0
        mask = 0
        for idx in range(self.next_initial):
            if self.last_tx[idx] > hb_time:
                mask |= 1 << idx
        return mask

    @property
    def initial_done(self) -> bool:
        return self.next_initial >= self.total

    def sendable_count(self) -> int:
        return (self.total - self.next_initial) + self.retx_mask.bit_count()


class SlotDriver:
    """Per-node transmit loop on a fixed arbitration grid.

    At most one tick per grid slot, so any window of k consecutive slots
    carries at most k times the granted budget. The driver sleeps when no
    writer has sendable fragments and wakes on the next grid point.
    """

    def __init__(self, engine: Engine, arbitration_us: int, origin: int = 0):
        self.engine = engine
        self.arbitration_us = arbitration_us
        self.origin = origin
        self.writers: list = []
        self.pool = None  # optional (pool_budget, {stream_id: guaranteed_min})
        self._next_event = None
        self._last_tick: int | None = None

    def add_writer(self, writer) -> None:
        self.writers.append(writer)
        writer.driver = self

    def wake(self) -> None:
        if self._next_event is not None:
            return
        now = self.engine.now
        arb = self.arbitration_us
        k = -(-(now - self.origin) // arb)
        t = self.origin + k * arb
        if self._last_tick is not None and t <= self._last_tick:
            t = self._last_tick + arb
        self._next_event = self.engine.schedule_at(t, self._tick)

    def _grants(self) -> list[int]:
        from .control import grant_slack  # local import avoids a cycle

        if self.pool is None or len(self.writers) == 1:
            return [w.slot_budget for w in self.writers]
        pool_budget, minima = self.pool
        entries = []
        for w in self.writers:
            gmin = minima.get(w.stream_id, 0)
            demand = max(0, w.sendable_count() - gmin)
            entries.append((w.stream_id, gmin, demand, w.earliest_deadline()))
        grants = grant_slack(pool_budget, entries)
        return [grants[w.stream_id] for w in self.writers]

    def _tick(self) -> None:
        self._next_event = None
        now = self.engine.now
        self._last_tick = now
        grants = self._grants()
        remaining = 0
        for writer, budget in zip(self.writers, grants):
            if not writer.enabled:
                continue
            writer.emit(budget, now)
            remaining += writer.sendable_count()
        if remaining:
            self._next_event = self.engine.schedule_at(
                now + self.arbitration_us, self._tick
            )


class Writer:
    """Sample-level BEC writer (one stream).

    scheduler='edf' interleaves overlapping samples earliest-deadline
    first, untransmitted fragments before retransmissions, ascending
    index as the final tie-break. scheduler='fifo' is the comparison
    policy that finishes the oldest incomplete sample before touching a
    newer one, idling while it waits for feedback.
    """

    def __init__(
        self,
        engine: Engine,
        cfg: StreamConfig,
        stream_id: str,
        downlink,
        stats: WriterStats | None = None,
        scheduler: str = "edf",
    ):
        if scheduler not in ("edf", "fifo"):
            raise ValueError("unknown scheduler %r" % scheduler)
        self.engine = engine
        self.cfg = cfg
        self.stream_id = stream_id
        self.downlink = downlink
        self.stats = stats if stats is not None else WriterStats()
        self.scheduler = scheduler
        self.pending: dict[int, _SampleTx] = {}
        self.driver: SlotDriver | None = None
        self.enabled = True
        # Mode-overridable parameters; cfg stays the admitted baseline.
        self.slot_budget = cfg.slot_budget
        self.active_fragment_size = cfg.fragment_size
        self.active_deadline_us = cfg.sample_deadline_us
        self.mode_id = 0
        self.transmit_audit = None  # optional (now, mode_id) hook

    # -- sample ingress ------------------------------------------------

    def on_new_sample(self, sample, now: int | None = None) -> None:
        now = self.engine.now if now is None else now
        self.stats.generated += 1
        if sample.t_deadline <= now:
            self.stats.dropped_at_source += 1
            return
        if sample.seq in self.pending:
            raise ValueError("duplicate sample seq %d" % sample.seq)
        frags = fragment_payload(
            sample.stream_id,
            sample.seq,
            sample.size,
            self.active_fragment_size,
            sample.payload,
        )
        tx = _SampleTx(sample.seq, frags, sample.t_gen, sample.t_deadline, now)
        self.pending[sample.seq] = tx
        tx.deadline_event = self.engine.schedule_at(
            sample.t_deadline, self._on_deadline, sample.seq
        )
        if self.driver is not None:
            self.driver.wake()

    # -- slot transmission ----------------------------------------------

    def sendable_count(self) -> int:
        if not self.enabled:
            return 0
        if self.scheduler == "fifo":
            cur = self._fifo_current()
            return cur.sendable_count() if cur is not None else 0
        return sum(tx.sendable_count() for tx in self.pending.values())

    def earliest_deadline(self):
        for tx in self.pending.values():
            if tx.sendable_count():
                return tx.t_deadline
        return None

    def _fifo_current(self):
        # Oldest sample that still has unacked fragments blocks the rest.
        for tx in self.pending.values():
            if tx.unacked_mask:
                return tx
        return None

    def emit(self, budget: int, now: int) -> int:
        """Transmit up to `budget` fragments; returns the number sent."""
        if budget <= 0 or not self.pending:
            return 0
        batch: list[DataFrag] = []
        drained: list[_SampleTx] = []
        if self.scheduler == "fifo":
            cur = self._fifo_current()
            candidates = [cur] if cur is not None else []
        else:
            candidates = self.pending.values()
        sent = 0
        for tx in candidates:
            if sent >= budget:
                break
            had_sendable = tx.sendable_count() > 0
            while sent < budget:
                frag, is_retx = self._pop_next(tx)
                if frag is None:
                    break
                tx.last_tx[frag.frag_index] = now
                batch.append(DataFrag(frag, tx.t_gen, tx.t_deadline, self.mode_id))
                if is_retx:
                    self.stats.frags_sent_retx += 1
                else:
                    self.stats.frags_sent_initial += 1
                sent += 1
            if had_sendable and tx.sendable_count() == 0 and tx.unacked_mask:
                drained.append(tx)
        if batch:
            if self.transmit_audit is not None:
                self.transmit_audit(now, self.mode_id, len(batch))
            self.downlink.send_fragments(batch, now)
        # A drained send queue with unacked fragments left means a pass
        # just finished: solicit feedback immediately.
        for tx in drained:
            self._send_heartbeat(tx, now)
            self._rearm_hb(tx)
        return sent

    def _pop_next(self, tx: _SampleTx):
        if tx.next_initial < tx.total:
            idx = tx.next_initial
            tx.next_initial += 1
            return tx.frags[idx], False
        if tx.retx_mask:
            low = tx.retx_mask & -tx.retx_mask
            tx.retx_mask ^= low
            return tx.frags[low.bit_length() - 1], True
        return None, None

    # -- feedback --------------------------------------------------------

    def on_nack(self, nack: Nack, now: int | None = None) -> None:
        now = self.engine.now if now is None else now
        tx = self.pending.get(nack.sample_seq)
        if tx is None:
            self.stats.nacks_ignored += 1
            return
        if nack.missing_mask == 0:
            self.stats.protocol_violations += 1
            return
        self.stats.nacks_received += 1
        missing = nack.missing_mask & tx.full_mask
        sent_mask = (1 << tx.next_initial) - 1
        stale = tx.stale_tx_mask(nack.hb_time)
        acked = sent_mask & ~missing
        tx.unacked_mask = (tx.unacked_mask | missing) & ~acked
        tx.retx_mask = (tx.retx_mask | (missing & sent_mask & ~stale)) & ~acked
        tx.last_activity = now
        # Waking on any state change also unblocks the FIFO policy when a
        # fully-acked head sample stops gating newer ones.
        if self.driver is not None and self.sendable_count():
            self.driver.wake()

    # -- heartbeats -------------------------------------------------------

    def _send_heartbeat(self, tx: _SampleTx, now: int) -> None:
        if not self.enabled:
            return
        self.stats.heartbeats_sent += 1
        hb = Heartbeat(
            stream_id=self.stream_id,
            sample_seq=tx.seq,
            total_frags=tx.total,
            t_gen=tx.t_gen,
            t_deadline=tx.t_deadline,
            writer_time=now,
        )
        self.downlink.send_heartbeat(hb, now)

    def _rearm_hb(self, tx: _SampleTx) -> None:
        if tx.hb_event is not None:
            tx.hb_event.cancel()
        tx.hb_event = self.engine.schedule_in(
            self.cfg.heartbeat_period_us, self._on_hb_timer, tx.seq
        )

    def _on_hb_timer(self, seq: int) -> None:
        tx = self.pending.get(seq)
        if tx is None:
            return
        now = self.engine.now
        if tx.unacked_mask == 0:
            tx.hb_event = None
            return
        if tx.initial_done and (
            tx.sendable_count() == 0
            or now - tx.last_activity >= self.cfg.retx_timeout_us
        ):
            self._send_heartbeat(tx, now)
        tx.hb_event = self.engine.schedule_in(
            self.cfg.heartbeat_period_us, self._on_hb_timer, seq
        )

    # -- expiry ------------------------------------------------------------

    def _on_deadline(self, seq: int) -> None:
        tx = self.pending.pop(seq, None)
        if tx is None:
            return
        if tx.hb_event is not None:
            tx.hb_event.cancel()
            tx.hb_event = None
        if self.driver is not None and self.sendable_count():
            self.driver.wake()


class _ReaderSample:
    __slots__ = (
        "seq",
        "total",
        "bitmap",
        "t_gen",
        "t_deadline",
        "delivered",
        "pieces",
        "last_hb_time",
    )

    def __init__(self, seq, total, t_gen, t_deadline, keep_pieces):
        self.seq = seq
        self.total = total
        self.bitmap = 0
        self.t_gen = t_gen
        self.t_deadline = t_deadline
        self.delivered = False
        self.pieces = {} if keep_pieces else None
        self.last_hb_time = -1


class Reader:
    """Receiver state machine: bitmap tracking, NACK on heartbeat,
    exactly-once delivery, deadline cleanup."""

    def __init__(
        self,
        engine: Engine,
        cfg: StreamConfig,
        stream_id: str,
        reader_id: str,
        uplink,
        stats: ReaderStats | None = None,
        nack_delay_us: int = 0,
        deliver_cb=None,
        keep_payload: bool = False,
    ):
        self.engine = engine
        self.cfg = cfg
        self.stream_id = stream_id
        self.reader_id = reader_id
        self.uplink = uplink
        self.stats = stats if stats is not None else ReaderStats()
        self.nack_delay_us = nack_delay_us
        self.deliver_cb = deliver_cb
        self.keep_payload = keep_payload
        self.samples: dict[int, _ReaderSample] = {}

    def _state_for(self, seq, total, t_gen, t_deadline, now):
        st = self.samples.get(seq)
        if st is None:
            if now >= t_deadline:
                return None
            st = _ReaderSample(seq, total, t_gen, t_deadline, self.keep_payload)
            self.samples[seq] = st
            self.engine.schedule_at(t_deadline, self._cleanup, seq)
        return st

    def on_fragments(self, batch: list[DataFrag]) -> None:
        now = self.engine.now
        for df in batch:
            frag = df.fragment
            st = self._state_for(
                frag.sample_seq, frag.total_frags, df.t_gen, df.t_deadline, now
            )
            if st is None or st.delivered or now >= st.t_deadline:
                continue
            if frag.frag_index >= st.total:
                self.stats.protocol_violations += 1
                continue
            bit = 1 << frag.frag_index
            if st.bitmap & bit:
                self.stats.duplicates += 1
                continue
            st.bitmap |= bit
            self.stats.frags_received += 1
            if st.pieces is not None:
                st.pieces[frag.frag_index] = frag
            if st.bitmap == (1 << st.total) - 1:
                st.delivered = True
                self.stats.record_delivery(now - st.t_gen)
                if self.deliver_cb is not None:
                    self.deliver_cb(self, st)

    def on_heartbeat(self, hb: Heartbeat) -> None:
        now = self.engine.now
        st = self._state_for(hb.sample_seq, hb.total_frags, hb.t_gen, hb.t_deadline, now)
        if st is None or st.delivered or now >= st.t_deadline:
            return
        st.last_hb_time = max(st.last_hb_time, hb.writer_time)
        if self.nack_delay_us > 0:
            self.engine.schedule_in(self.nack_delay_us, self._send_nack, hb.sample_seq)
        else:
            self._send_nack(hb.sample_seq)

    def _send_nack(self, seq: int) -> None:
        st = self.samples.get(seq)
        now = self.engine.now
        if st is None or st.delivered or now >= st.t_deadline:
            return
        missing = ~st.bitmap & ((1 << st.total) - 1)
        if missing == 0:
            return
        self.stats.nacks_sent += 1
        nack = Nack(
            stream_id=self.stream_id,
            sample_seq=seq,
            missing_mask=missing,
            total_frags=st.total,
            reader_id=self.reader_id,
            hb_time=st.last_hb_time,
        )
        self.uplink.send_nack(nack, now)

    def _cleanup(self, seq: int) -> None:
        st = self.samples.pop(seq, None)
        if st is not None and not st.delivered:
            self.stats.missed_observed += 1

    def reassembled_payload(self, st: _ReaderSample) -> bytes:
        if st.pieces is None:
            raise ValueError("reader was not configured to keep payloads")
        return b"".join(st.pieces[i].payload for i in range(st.total))


class UnicastDownlink:
    """Writer-side sending port over a single link to one reader.

    tx_time_us models the arbitration slot the batch occupies: nothing
    sent in a slot can arrive before the slot has elapsed, which keeps
    min_slots a sound lower bound on lossless delivery latency.
    """

    def __init__(
        self,
        engine: Engine,
        link: Link,
        reader,
        control_lossless=False,
        tx_time_us: int = 0,
    ):
        self.engine = engine
        self.link = link
        self.reader = reader
        self.control_lossless = control_lossless
        self.tx_time_us = tx_time_us

    def send_fragments(self, batch: list[DataFrag], now: int) -> None:
        link = self.link
        survivors = [df for df in batch if link.try_send(df.frame_bytes)]
        if survivors:
            self.engine.schedule_in(
                self.tx_time_us + link.latency_us, self.reader.on_fragments, survivors
            )

    def send_heartbeat(self, hb: Heartbeat, now: int) -> None:
        if self.link.try_send(hb.frame_bytes, bypass_loss=self.control_lossless):
            self.engine.schedule_in(
                self.tx_time_us + self.link.latency_us, self.reader.on_heartbeat, hb
            )


class UnicastUplink:
    """Reader-side feedback port back to the writer."""

    def __init__(self, engine: Engine, link: Link, writer, control_lossless=False):
        self.engine = engine
        self.link = link
        self.writer = writer
        self.control_lossless = control_lossless

    def send_nack(self, nack: Nack, now: int) -> None:
        if self.link.try_send(nack.frame_bytes, bypass_loss=self.control_lossless):
            self.engine.schedule_in(self.link.latency_us, self.writer.on_nack, nack)


def nack_missing_indices(nack: Nack) -> list[int]:
    return mask_to_indices(nack.missing_mask)
