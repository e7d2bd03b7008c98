"""Multicast error protection: one writer, many readers.

Retransmissions are bundled: the fragment set sent after a heartbeat
round is the union of the missing sets reported by the targeted
readers, and each multicast transmission is charged once against the
slot budget no matter how many readers it serves. Receiver NACKs are
staggered per reader rank so feedback does not collide in one slot.
Readers whose feedback has gone stale are excluded from bundling so a
dead reader cannot stall the group.
"""

from __future__ import annotations

from dataclasses import dataclass

from .engine import Engine
from .stream import StreamConfig
from .transport import DataFrag, Heartbeat, Nack, Writer

DEFAULT_NACK_STAGGER_US = 100
DEFAULT_STALE_HEARTBEATS = 5


@dataclass
class ReaderEntry:
    """Writer-side view of one registered reader."""

    reader_id: str
    rank: int
    priority_key: int
    link: object
    last_seen: int = 0

    def __post_init__(self):
        self.missing: dict[int, int] = {}  # sample_seq -> last reported mask
        self.last_nack: dict[int, int] = {}


@dataclass(frozen=True)
class RetransmissionBundle:
    sample_seq: int
    fragment_mask: int
    targeted_readers: tuple

    @property
    def fragment_indices(self) -> list[int]:
        from .stream import mask_to_indices

        return mask_to_indices(self.fragment_mask)


def bundle_nacks(entries, sample_seq: int, now: int, stale_after_us: int) -> RetransmissionBundle:
    """Union the missing sets of all fresh readers for one sample."""
    mask = 0
    targets = []
    for entry in entries:
        if now - entry.last_seen > stale_after_us:
            continue
        reported = entry.missing.get(sample_seq, 0)
        if reported:
            mask |= reported
            targets.append(entry.reader_id)
    return RetransmissionBundle(sample_seq, mask, tuple(targets))


@dataclass(frozen=True)
class FragmentRequest:
    """One candidate fragment with the strongest requester behind it."""

    sample_seq: int
    frag_index: int
    deadline: int
    priority_key: int
    is_retx: bool = True


def prioritize(requests, budget: int) -> list[FragmentRequest]:
    """Order fragment requests by (highest requester priority, earliest
    deadline, ascending index) and keep the top `budget`."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    ordered = sorted(
        requests,
        key=lambda r: (-r.priority_key, r.deadline, r.is_retx, r.frag_index),
    )
    return ordered[:budget]


class MulticastDownlink:
    """Fans one transmission out over every reader's link; loss is drawn
    independently per link."""

    def __init__(self, engine: Engine, targets, control_lossless=False, tx_time_us=0):
        # targets: list of (link, reader) in registry rank order
        self.engine = engine
        self.targets = targets
        self.control_lossless = control_lossless
        self.tx_time_us = tx_time_us

    def send_fragments(self, batch: list[DataFrag], now: int) -> None:
        for link, reader in self.targets:
            survivors = [df for df in batch if link.try_send(df.frame_bytes)]
            if survivors:
                self.engine.schedule_in(
                    self.tx_time_us + link.latency_us, reader.on_fragments, survivors
                )

    def send_heartbeat(self, hb: Heartbeat, now: int) -> None:
        for link, reader in self.targets:
            if link.try_send(hb.frame_bytes, bypass_loss=self.control_lossless):
                self.engine.schedule_in(
                    self.tx_time_us + link.latency_us, reader.on_heartbeat, hb
                )


class MulticastWriter(Writer):
    """Writer variant tracking per-reader state learned from NACKs only.

    The writer's view is pessimistic: NACK loss can only make it
    retransmit more, never less, so a reader always holds at least what
    the writer believes it holds.
    """

    def __init__(
        self,
        engine: Engine,
        cfg: StreamConfig,
        stream_id: str,
        downlink,
        entries: list[ReaderEntry],
        stats=None,
        stale_after_us: int | None = None,
    ):
        super().__init__(engine, cfg, stream_id, downlink, stats, scheduler="edf")
        self.entries = {e.reader_id: e for e in entries}
        self.stale_after_us = (
            stale_after_us
            if stale_after_us is not None
            else DEFAULT_STALE_HEARTBEATS * cfg.heartbeat_period_us
        )
        self._uniform_priorities = len({e.priority_key for e in entries}) <= 1

    # -- feedback ---------------------------------------------------------

    def on_nack(self, nack: Nack, now: int | None = None) -> None:
        now = self.engine.now if now is None else now
        entry = self.entries.get(nack.reader_id)
        if entry is None:
            self.stats.nacks_ignored += 1
            return
        entry.last_seen = now
        tx = self.pending.get(nack.sample_seq)
        if tx is None:
            self.stats.nacks_ignored += 1
            return
        if nack.missing_mask == 0:
            self.stats.protocol_violations += 1
            return
        self.stats.nacks_received += 1
        mask = nack.missing_mask & tx.full_mask
        entry.missing[nack.sample_seq] = mask
        entry.last_nack[nack.sample_seq] = now
        sent_mask = (1 << tx.next_initial) - 1
        bundle = bundle_nacks(
            self.entries.values(), nack.sample_seq, now, self.stale_after_us
        )
        union = bundle.fragment_mask
        unsent = tx.full_mask & ~sent_mask
        stale = tx.stale_tx_mask(nack.hb_time)
        # Queue what this reader misses (unless the repair is already in
        # flight), drop anything no fresh reader still misses, and never
        # queue fragments that were never sent.
        tx.retx_mask = (tx.retx_mask | (mask & sent_mask & ~stale)) & union & sent_mask
        tx.unacked_mask = union | unsent
        tx.last_activity = now
        if self.driver is not None and self.sendable_count():
            self.driver.wake()

    # -- selection ----------------------------------------------------------

    def emit(self, budget: int, now: int) -> int:
        if self._uniform_priorities:
            return super().emit(budget, now)
        return self._emit_prioritized(budget, now)

    def _emit_prioritized(self, budget: int, now: int) -> int:
        if budget <= 0 or not self.pending:
            return 0
        base_priority = max(
            (e.priority_key for e in self.entries.values()), default=0
        )
        candidates: list[tuple] = []
        for tx in self.pending.values():
            take = min(budget, tx.total - tx.next_initial)
            for off in range(take):
                idx = tx.next_initial + off
                candidates.append(
                    ((-base_priority, tx.t_deadline, 0, idx), tx, idx, False)
                )
            mask = tx.retx_mask
            picked = 0
            while mask and picked < budget:
                low = mask & -mask
                mask ^= low
                idx = low.bit_length() - 1
                prio = self._retx_priority(tx.seq, idx, now)
                candidates.append(((-prio, tx.t_deadline, 1, idx), tx, idx, True))
                picked += 1
        candidates.sort(key=lambda c: c[0])
        batch = []
        drained_check = set()
        for _, tx, idx, is_retx in candidates[:budget]:
            if is_retx:
                tx.retx_mask &= ~(1 << idx)
                self.stats.frags_sent_retx += 1
            else:
                # Initial sends must advance the pointer contiguously; the
                # sort keeps per-sample index order so idx == next_initial.
                tx.next_initial = idx + 1
                self.stats.frags_sent_initial += 1
            tx.last_tx[idx] = now
            batch.append(DataFrag(tx.frags[idx], tx.t_gen, tx.t_deadline, self.mode_id))
            drained_check.add(tx.seq)
        if batch:
            if self.transmit_audit is not None:
                self.transmit_audit(now, self.mode_id, len(batch))
            self.downlink.send_fragments(batch, now)
        for seq in sorted(drained_check):
            tx = self.pending.get(seq)
            if tx is not None and tx.sendable_count() == 0 and tx.unacked_mask:
                self._send_heartbeat(tx, now)
                self._rearm_hb(tx)
        return len(batch)

    def _retx_priority(self, seq: int, idx: int, now: int) -> int:
        best = None
        bit = 1 << idx
        for entry in self.entries.values():
            if now - entry.last_seen > self.stale_after_us:
                continue
            if entry.missing.get(seq, 0) & bit:
                if best is None or entry.priority_key > best:
                    best = entry.priority_key
        return best if best is not None else 0

    # -- housekeeping ---------------------------------------------------------

    def heartbeat_round(self, sample_seq: int, now: int | None = None) -> None:
        """Send one multicast heartbeat for a pending sample; readers
        answer with rank-staggered NACKs."""
        now = self.engine.now if now is None else now
        tx = self.pending.get(sample_seq)
        if tx is None:
            raise ValueError("sample %d is not pending" % sample_seq)
        self._send_heartbeat(tx, now)
        self._rearm_hb(tx)

    def current_bundle(self, sample_seq: int) -> RetransmissionBundle:
        return bundle_nacks(
            self.entries.values(), sample_seq, self.engine.now, self.stale_after_us
        )

    def _on_deadline(self, seq: int) -> None:
        super()._on_deadline(seq)
        for entry in self.entries.values():
            entry.missing.pop(seq, None)
            entry.last_nack.pop(seq, None)
