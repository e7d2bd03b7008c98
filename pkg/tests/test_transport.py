"""Writer/reader state machines: scheduling, NACK handling, expiry."""

import random
from fractions import Fraction

import pytest

from samplecast.channel import IidLoss, Link, Lossless, derive_seed
from samplecast.engine import Engine
from samplecast.stream import Sample, StreamConfig, indices_to_mask
from samplecast.transport import (
    DataFrag,
    Heartbeat,
    Nack,
    Reader,
    SlotDriver,
    UnicastDownlink,
    UnicastUplink,
    Writer,
    required_attempts,
    residual_failure_prob,
)


def make_cfg(**kw):
    base = dict(
        sample_period_us=10_000,
        sample_deadline_us=30_000,
        sample_size=10_000,
        fragment_size=1000,
        heartbeat_period_us=1000,
        retx_timeout_us=2000,
        arbitration_us=100,
        slot_budget=4,
    )
    base.update(kw)
    return StreamConfig(**base)


def make_sample(cfg, seq=0, t_gen=0, deadline_us=None):
    deadline_us = deadline_us if deadline_us is not None else cfg.sample_deadline_us
    return Sample(
        stream_id="s", seq=seq, size=cfg.sample_size, t_gen=t_gen,
        t_deadline=t_gen + deadline_us,
    )


class RecordingDownlink:
    """Captures writer output without any channel in between."""

    def __init__(self):
        self.batches = []
        self.heartbeats = []

    def send_fragments(self, batch, now):
        self.batches.append(
            (now, [(df.fragment.sample_seq, df.fragment.frag_index) for df in batch])
        )

    def send_heartbeat(self, hb, now):
        self.heartbeats.append((now, hb.sample_seq))

    def sent(self):
        return [item for _, batch in self.batches for item in batch]


class RecordingUplink:
    def __init__(self):
        self.nacks = []

    def send_nack(self, nack, now):
        self.nacks.append((now, nack))


def make_writer(cfg=None, scheduler="edf"):
    cfg = cfg or make_cfg()
    engine = Engine()
    downlink = RecordingDownlink()
    writer = Writer(engine, cfg, "s", downlink, scheduler=scheduler)
    return engine, writer, downlink


class TestWriterNewSample:
    def test_enqueues_all_fragments_unacked(self):
        engine, writer, _ = make_writer()
        writer.on_new_sample(make_sample(writer.cfg))
        tx = writer.pending[0]
        assert tx.total == 10
        assert tx.unacked_mask == (1 << 10) - 1
        assert tx.sendable_count() == 10

    def test_overlapping_samples_both_pending(self):
        cfg = make_cfg(sample_deadline_us=20_000, sample_period_us=10_000)
        engine, writer, _ = make_writer(cfg)
        writer.on_new_sample(make_sample(cfg, seq=0, t_gen=0))
        engine.run_until(10_000)
        writer.on_new_sample(make_sample(cfg, seq=1, t_gen=10_000))
        assert set(writer.pending) == {0, 1}

    def test_expired_sample_dropped_and_counted(self):
        engine, writer, _ = make_writer()
        engine.run_until(50_000)
        writer.on_new_sample(make_sample(writer.cfg, seq=0, t_gen=0))
        assert writer.pending == {}
        assert writer.stats.dropped_at_source == 1

    def test_duplicate_seq_rejected(self):
        engine, writer, _ = make_writer()
        writer.on_new_sample(make_sample(writer.cfg))
        with pytest.raises(ValueError):
            writer.on_new_sample(make_sample(writer.cfg))


class TestWriterSlotSelection:
    def test_edf_picks_earliest_deadline(self):
        engine, writer, down = make_writer()
        writer.on_new_sample(make_sample(writer.cfg, seq=0, deadline_us=3000))
        writer.on_new_sample(make_sample(writer.cfg, seq=1, deadline_us=5000))
        writer.emit(1, 0)
        assert down.sent() == [(0, 0)]

    def test_index_order_within_sample(self):
        engine, writer, down = make_writer()
        writer.on_new_sample(make_sample(writer.cfg))
        writer.emit(3, 0)
        assert down.sent() == [(0, 0), (0, 1), (0, 2)]

    def test_edf_then_fill(self):
        # A has 1 fragment left, B has 5 -> A's one, then B's first two.
        cfg = make_cfg(sample_size=5000)
        engine, writer, down = make_writer(cfg)
        writer.on_new_sample(make_sample(cfg, seq=0, deadline_us=3000))
        writer.emit(4, 0)  # A: fragments 0..3 sent, 4 left
        writer.on_new_sample(make_sample(cfg, seq=1, deadline_us=5000))
        down.batches.clear()
        writer.emit(3, 100)
        assert down.sent() == [(0, 4), (1, 0), (1, 1)]

    def test_untransmitted_precede_retransmissions(self):
        cfg = make_cfg(sample_size=5000)
        engine, writer, down = make_writer(cfg)
        writer.on_new_sample(make_sample(cfg))
        writer.emit(3, 0)  # 0,1,2 sent; 3,4 untransmitted
        writer.on_nack(Nack("s", 0, indices_to_mask([1]), 5), 10)
        down.batches.clear()
        writer.emit(3, 100)
        assert down.sent() == [(0, 3), (0, 4), (0, 1)]

    def test_budget_zero_sends_nothing(self):
        engine, writer, down = make_writer()
        writer.on_new_sample(make_sample(writer.cfg))
        assert writer.emit(0, 0) == 0
        assert down.batches == []


class TestWriterNack:
    def prepared_writer(self):
        engine, writer, down = make_writer()
        writer.on_new_sample(make_sample(writer.cfg))
        writer.emit(10, 0)  # full initial pass
        return engine, writer, down

    def test_missing_marked_rest_acked(self):
        engine, writer, _ = self.prepared_writer()
        writer.on_nack(Nack("s", 0, indices_to_mask([3, 7]), 10), 10)
        tx = writer.pending[0]
        assert tx.unacked_mask == indices_to_mask([3, 7])
        assert tx.retx_mask == indices_to_mask([3, 7])

    def test_empty_missing_is_protocol_violation(self):
        engine, writer, _ = self.prepared_writer()
        writer.on_nack(Nack("s", 0, 0, 10), 10)
        assert writer.stats.protocol_violations == 1
        assert writer.pending[0].retx_mask == 0

    def test_duplicate_nack_idempotent(self):
        engine, writer, _ = self.prepared_writer()
        nack = Nack("s", 0, indices_to_mask([3, 7]), 10)
        writer.on_nack(nack, 10)
        state = (writer.pending[0].unacked_mask, writer.pending[0].retx_mask)
        writer.on_nack(nack, 11)
        assert (writer.pending[0].unacked_mask, writer.pending[0].retx_mask) == state

    def test_unknown_sample_ignored_and_counted(self):
        engine, writer, _ = self.prepared_writer()
        writer.on_nack(Nack("s", 99, 1, 10), 10)
        assert writer.stats.nacks_ignored == 1

    def test_later_nack_acks_retx_queue(self):
        engine, writer, _ = self.prepared_writer()
        writer.on_nack(Nack("s", 0, indices_to_mask([3, 7]), 10), 10)
        writer.on_nack(Nack("s", 0, indices_to_mask([7]), 10), 20)
        tx = writer.pending[0]
        assert tx.retx_mask == indices_to_mask([7])
        assert tx.unacked_mask == indices_to_mask([7])


class TestWriterHeartbeat:
    def test_round_end_heartbeat_after_initial_pass(self):
        engine, writer, down = make_writer()
        writer.on_new_sample(make_sample(writer.cfg))
        writer.emit(10, 0)
        assert down.heartbeats == [(0, 0)]

    def test_no_heartbeat_mid_initial_pass(self):
        engine, writer, down = make_writer()
        writer.on_new_sample(make_sample(writer.cfg))
        writer.emit(5, 0)
        assert down.heartbeats == []

    def test_all_acked_cancels_timer(self):
        engine, writer, down = make_writer()
        writer.on_new_sample(make_sample(writer.cfg))
        writer.emit(10, 0)
        tx = writer.pending[0]
        tx.unacked_mask = 0
        down.heartbeats.clear()
        writer._on_hb_timer(0)
        assert down.heartbeats == []
        assert tx.hb_event is None

    def test_unacked_triggers_periodic_heartbeat(self):
        engine, writer, down = make_writer()
        writer.on_new_sample(make_sample(writer.cfg))
        writer.emit(10, 0)
        down.heartbeats.clear()
        engine.run_until(writer.cfg.heartbeat_period_us + 1)
        assert len(down.heartbeats) == 1

    def test_suppressed_while_retx_backlog_fresh(self):
        engine, writer, down = make_writer()
        writer.on_new_sample(make_sample(writer.cfg))
        writer.emit(10, 0)
        engine.run_until(500)
        writer.on_nack(Nack("s", 0, indices_to_mask([2]), 10), 500)
        down.heartbeats.clear()
        # Timer fires with an unsent backlog and fresh NACK activity.
        writer._on_hb_timer(0)
        assert down.heartbeats == []

    def test_stale_backlog_heartbeats_anyway(self):
        cfg = make_cfg(retx_timeout_us=2000)
        engine, writer, down = make_writer(cfg)
        writer.on_new_sample(make_sample(cfg))
        writer.emit(10, 0)
        engine.run_until(100)
        writer.on_nack(Nack("s", 0, indices_to_mask([2]), 10), 100)
        down.heartbeats.clear()
        engine.run_until(100 + cfg.retx_timeout_us + cfg.heartbeat_period_us)
        assert down.heartbeats  # sent despite pending backlog


class TestWriterExpiry:
    def test_deadline_removes_pending_and_cancels_timers(self):
        engine, writer, down = make_writer()
        writer.on_new_sample(make_sample(writer.cfg))
        writer.emit(10, 0)
        engine.run_until(writer.cfg.sample_deadline_us + 1)
        assert writer.pending == {}
        hb_after = len(down.heartbeats)
        engine.run_until(writer.cfg.sample_deadline_us + 10_000)
        assert len(down.heartbeats) == hb_after  # nothing fires post-cleanup


def frag_msg(cfg, seq, idx, total=10, t_gen=0, deadline_us=None):
    from samplecast.stream import Fragment

    deadline_us = deadline_us if deadline_us is not None else cfg.sample_deadline_us
    frag = Fragment("s", seq, idx, idx * cfg.fragment_size, cfg.fragment_size, total)
    return DataFrag(frag, t_gen, t_gen + deadline_us)


class TestReader:
    def make_reader(self, cfg=None):
        cfg = cfg or make_cfg()
        engine = Engine()
        uplink = RecordingUplink()
        reader = Reader(engine, cfg, "s", "r", uplink)
        return engine, reader, uplink

    def test_completion_delivers_once_with_latency(self):
        engine, reader, _ = self.make_reader()
        cfg = reader.cfg
        engine.run_until(500)
        reader.on_fragments([frag_msg(cfg, 0, i) for i in range(10)])
        assert reader.stats.delivered == 1
        assert reader.stats.latencies_us == [500]
        reader.on_fragments([frag_msg(cfg, 0, 3)])
        assert reader.stats.delivered == 1  # duplicate suppressed

    def test_heartbeat_on_incomplete_nacks_missing(self):
        engine, reader, uplink = self.make_reader()
        cfg = reader.cfg
        reader.on_fragments(
            [frag_msg(cfg, 0, i) for i in range(10) if i not in (3, 7)]
        )
        reader.on_heartbeat(Heartbeat("s", 0, 10, 0, cfg.sample_deadline_us, 0))
        assert len(uplink.nacks) == 1
        assert uplink.nacks[0][1].missing_mask == indices_to_mask([3, 7])

    def test_heartbeat_before_any_data_nacks_full_range(self):
        engine, reader, uplink = self.make_reader()
        cfg = reader.cfg
        reader.on_heartbeat(Heartbeat("s", 0, 10, 0, cfg.sample_deadline_us, 0))
        assert uplink.nacks[0][1].missing_mask == (1 << 10) - 1

    def test_complete_sample_stays_silent_on_heartbeat(self):
        engine, reader, uplink = self.make_reader()
        cfg = reader.cfg
        reader.on_fragments([frag_msg(cfg, 0, i) for i in range(10)])
        reader.on_heartbeat(Heartbeat("s", 0, 10, 0, cfg.sample_deadline_us, 0))
        assert uplink.nacks == []

    def test_fragment_after_deadline_dropped_and_missed(self):
        engine, reader, _ = self.make_reader()
        cfg = reader.cfg
        reader.on_fragments([frag_msg(cfg, 0, 0)])
        engine.run_until(cfg.sample_deadline_us + 1)
        reader.on_fragments([frag_msg(cfg, 0, 1)])
        assert reader.stats.delivered == 0
        assert reader.stats.missed_observed == 1
        assert reader.stats.frags_received == 1

    def test_out_of_range_index_is_protocol_violation(self):
        engine, reader, _ = self.make_reader()
        cfg = reader.cfg
        reader.on_fragments([frag_msg(cfg, 0, 0)])
        bad = frag_msg(cfg, 0, 0)
        from samplecast.stream import Fragment

        bad_frag = Fragment("s", 0, 12, 0, cfg.fragment_size, 10)
        reader.on_fragments([DataFrag(bad_frag, 0, cfg.sample_deadline_us)])
        assert reader.stats.protocol_violations == 1

    def test_staggered_nack_recomputes_missing(self):
        cfg = make_cfg()
        engine = Engine()
        uplink = RecordingUplink()
        reader = Reader(engine, cfg, "s", "r", uplink, nack_delay_us=200)
        reader.on_fragments([frag_msg(cfg, 0, i) for i in range(9)])
        reader.on_heartbeat(Heartbeat("s", 0, 10, 0, cfg.sample_deadline_us, 0))
        # The missing fragment arrives while the NACK is still pending.
        engine.run_until(100)
        reader.on_fragments([frag_msg(cfg, 0, 9)])
        engine.run_until(300)
        assert uplink.nacks == []  # complete by fire time: stay silent


class TestWireSizes:
    def test_canonical_message_sizes(self):
        from samplecast.stream import Fragment

        frag = Fragment("s", 0, 0, 0, 1400, 10)
        assert DataFrag(frag, 0, 1000).frame_bytes == 64 + 1400
        assert Heartbeat("s", 0, 10, 0, 1000, 0).frame_bytes == 32
        assert Nack("s", 0, 1, 10).frame_bytes == 32 + 2
        assert Nack("s", 0, 1, 1000).frame_bytes == 32 + 125


class TestPendingBound:
    def test_pending_never_exceeds_deadline_over_period(self):
        cfg = make_cfg(sample_deadline_us=30_000, sample_period_us=10_000)
        engine, writer, reader, _, _ = wired_pair(cfg, p_loss=0.2, seed=2)
        worst = 0
        for seq in range(12):
            writer.on_new_sample(
                Sample("s", seq, cfg.sample_size, engine.now,
                       engine.now + cfg.sample_deadline_us)
            )
            worst = max(worst, len(writer.pending))
            engine.run_until(engine.now + cfg.sample_period_us)
            worst = max(worst, len(writer.pending))
        assert worst <= cfg.max_pending


class TestResidualFailureProb:
    def test_exact_values(self):
        # Oracle: exact rational arithmetic, frozen here.
        exact = float(1 - (1 - Fraction(1, 2) ** 5) ** 10)
        assert exact == pytest.approx(0.27202384332787144, abs=1e-15)
        assert residual_failure_prob(10, 0.5, 5) == pytest.approx(exact, abs=1e-12)
        exact20 = float(1 - (1 - Fraction(1, 2) ** 20) ** 10)
        assert residual_failure_prob(10, 0.5, 20) == pytest.approx(exact20, abs=1e-12)
        assert exact20 == pytest.approx(9.5367e-6, abs=1e-9)

    def test_zero_loss_never_fails(self):
        for n in (1, 10, 500):
            assert residual_failure_prob(n, 0.0, 1) == 0.0

    def test_monte_carlo_cross_check(self):
        rng = random.Random(123)
        n, p, r = 8, 0.4, 3
        trials = 40_000
        misses = 0
        for _ in range(trials):
            for _frag in range(n):
                if all(rng.random() < p for _ in range(r)):
                    misses += 1
                    break
        q = residual_failure_prob(n, p, r)
        se = (q * (1 - q) / trials) ** 0.5
        assert abs(misses / trials - q) < 3 * se

    def test_required_attempts(self):
        assert required_attempts(10, 0.0, 1e-3) == 1
        r = required_attempts(188, 0.5, 1e-3)
        assert r == 18
        assert residual_failure_prob(188, 0.5, r) <= 1e-3
        assert residual_failure_prob(188, 0.5, r - 1) > 1e-3


def wired_pair(cfg, p_loss=0.0, seed=0, control_lossless=False, scripted=None):
    engine = Engine()
    model = IidLoss(p_loss) if p_loss else Lossless()
    down = Link("w->r", model, 25, random.Random(derive_seed(seed, "w->r")))
    up_model = IidLoss(p_loss) if (p_loss and not control_lossless) else Lossless()
    up = Link("r->w", up_model, 25, random.Random(derive_seed(seed, "r->w")))
    if scripted:
        down.scripted_drops = set(scripted)
    reader = Reader(engine, cfg, "s", "r", None, keep_payload=True)
    writer = Writer(
        engine, cfg, "s",
        UnicastDownlink(engine, down, reader, control_lossless, cfg.arbitration_us),
    )
    reader.uplink = UnicastUplink(engine, up, writer, control_lossless)
    driver = SlotDriver(engine, cfg.arbitration_us)
    driver.add_writer(writer)
    return engine, writer, reader, down, up


class TestEndToEnd:
    def test_lossless_latency_respects_min_slots(self):
        from samplecast.stream import min_slots

        cfg = make_cfg(slot_budget=3)
        engine, writer, reader, _, _ = wired_pair(cfg)
        payload = random.Random(0).randbytes(cfg.sample_size)
        writer.on_new_sample(
            Sample("s", 0, cfg.sample_size, 0, cfg.sample_deadline_us, payload)
        )
        engine.run_until(cfg.sample_deadline_us)
        assert reader.stats.delivered == 1
        bound = min_slots(10, 3) * cfg.arbitration_us
        assert reader.stats.latencies_us[0] >= bound

    def test_payload_byte_exact_over_lossy_channel(self):
        cfg = make_cfg()
        engine, writer, reader, _, _ = wired_pair(cfg, p_loss=0.3, seed=5)
        delivered_payloads = {}

        def capture(rd, st):
            delivered_payloads[st.seq] = rd.reassembled_payload(st)

        reader.deliver_cb = capture
        payloads = {}
        for seq in range(5):
            payload = random.Random(seq).randbytes(cfg.sample_size)
            payloads[seq] = payload
            writer.on_new_sample(
                Sample("s", seq, cfg.sample_size, engine.now, engine.now + cfg.sample_deadline_us, payload)
            )
            engine.run_until(engine.now + cfg.sample_period_us)
        engine.run_until(engine.now + cfg.sample_deadline_us)
        assert reader.stats.delivered == 5
        assert delivered_payloads == payloads
        # Timeliness: every delivery happened within the deadline.
        assert all(l <= cfg.sample_deadline_us for l in reader.stats.latencies_us)

    def test_heartbeat_loss_recovered_by_next_heartbeat(self):
        # Drop fragment 3 and the first heartbeat; the periodic heartbeat
        # must solicit the NACK one period later.
        cfg = make_cfg()
        engine, writer, reader, down, _ = wired_pair(cfg, scripted=[3, 10])
        writer.on_new_sample(
            Sample("s", 0, cfg.sample_size, 0, cfg.sample_deadline_us)
        )
        engine.run_until(cfg.sample_deadline_us)
        assert reader.stats.delivered == 1
        assert writer.stats.heartbeats_sent >= 2
        # Recovery cost one extra heartbeat period.
        assert reader.stats.latencies_us[0] >= cfg.heartbeat_period_us

    def test_shaping_budget_per_slot(self):
        cfg = make_cfg(slot_budget=3)
        engine, writer, reader, _, _ = wired_pair(cfg, p_loss=0.4, seed=9)
        emissions = []
        writer.transmit_audit = lambda now, mode, count: emissions.append((now, count))
        for seq in range(5):
            writer.on_new_sample(
                Sample("s", seq, cfg.sample_size, engine.now, engine.now + cfg.sample_deadline_us)
            )
            engine.run_until(engine.now + cfg.sample_period_us)
        engine.run_until(engine.now + cfg.sample_deadline_us)
        assert emissions
        assert all(count <= cfg.slot_budget for _, count in emissions)
        times = [t for t, _ in emissions]
        assert all(b - a >= cfg.arbitration_us for a, b in zip(times, times[1:]))
        assert all(t % cfg.arbitration_us == 0 for t in times)

    def test_fifo_blocks_on_head_sample(self):
        # FIFO: while the oldest sample waits for feedback, newer samples
        # must not transmit.
        cfg = make_cfg(sample_size=2000, sample_deadline_us=20_000)
        engine = Engine()
        down = RecordingDownlink()
        writer = Writer(engine, cfg, "s", down, scheduler="fifo")
        writer.on_new_sample(make_sample(cfg, seq=0, deadline_us=20_000))
        writer.on_new_sample(make_sample(cfg, seq=1, deadline_us=30_000))
        writer.emit(4, 0)
        assert down.sent() == [(0, 0), (0, 1)]  # head sample only
        down.batches.clear()
        writer.emit(4, 100)
        assert down.sent() == []  # waiting on head feedback: idle
        writer.on_nack(Nack("s", 0, indices_to_mask([1]), 2), 150)
        writer.emit(4, 200)
        assert down.sent() == [(0, 1)]
