"""Application-centric resource management.

One controller admits streams, arbitrates per-slot slack and drives the
safety-preserving reconfiguration protocol: a two-phase prepare/commit
with a pre-agreed barrier time, command retransmission against message
loss, heartbeat-based liveness monitoring in both directions and
node-level fail-silent fallback. All ACTIVE nodes hold the same mode id
at every instant; a node that cannot confirm the committed mode stops
transmitting instead of running a stale one.

Simulated clocks are synchronized (the deployment context assumes
GNSS/PTP-grade sync), so "switch at the barrier" is meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from .engine import Engine
from .metrics import RunStats
from .stream import CONTROL_MSG_BYTES
from .transport import required_attempts


# ---------------------------------------------------------------------------
# Modes and admission


@dataclass(frozen=True)
class StreamOverride:
    slot_budget: int | None = None
    fragment_size: int | None = None
    sample_deadline_us: int | None = None


@dataclass(frozen=True)
class Mode:
    mode_id: int
    assignments: tuple  # ((stream_id, StreamOverride), ...) sorted by stream

    def override_for(self, stream_id: str) -> StreamOverride | None:
        for sid, ov in self.assignments:
            if sid == stream_id:
                return ov
        return None


def make_mode(mode_id: int, assignments: dict[str, StreamOverride]) -> Mode:
    return Mode(mode_id, tuple(sorted(assignments.items())))


@dataclass(frozen=True)
class StreamRequirement:
    stream_id: str
    sample_size: int
    fragment_size: int
    sample_deadline_us: int
    p_max: float
    residual_target: float = 1e-3


class AdmissionError(ValueError):
    def __init__(self, message: str, shortfall: int, demands: dict):
        super().__init__(message)
        self.shortfall = shortfall
        self.demands = demands


def required_budget(req: StreamRequirement, arbitration_us: int) -> int:
    """Fragments per slot needed to fit the worst-case retransmission load
    inside the deadline."""
    n = math.ceil(req.sample_size / req.fragment_size)
    r = required_attempts(n, req.p_max, req.residual_target)
    slots = req.sample_deadline_us // arbitration_us
    if slots < 1:
        raise AdmissionError(
            "stream %s: deadline shorter than one arbitration slot" % req.stream_id,
            shortfall=n * r,
            demands={req.stream_id: n * r},
        )
    return math.ceil(n * r / slots)


def admit(
    requirements: list[StreamRequirement],
    network_capacity: int,
    arbitration_us: int,
    mode_id: int = 1,
) -> Mode:
    """Admit the stream set iff the summed per-slot budgets fit the
    capacity; returns the resulting mode or raises with the shortfall."""
    demands = {}
    for req in requirements:
        demands[req.stream_id] = required_budget(req, arbitration_us)
    total = sum(demands.values())
    if total > network_capacity:
        raise AdmissionError(
            "demand %d exceeds capacity %d" % (total, network_capacity),
            shortfall=total - network_capacity,
            demands=demands,
        )
    return make_mode(
        mode_id,
        {sid: StreamOverride(slot_budget=b) for sid, b in demands.items()},
    )


# ---------------------------------------------------------------------------
# Shared slack


def grant_slack(pool_budget: int, entries) -> dict[str, int]:
    """Distribute one slot's fragment pool.

    entries: (stream_id, guaranteed_min, extra_demand, deadline) with
    deadline None meaning "no pending sample". Minima are granted first;
    the remainder goes earliest-deadline-first, one fragment at a time,
    round-robin among equal deadlines. Never exceeds the pool.
    """
    minima = sum(e[1] for e in entries)
    if minima > pool_budget:
        raise ValueError("guaranteed minima %d exceed pool %d" % (minima, pool_budget))
    grants = {e[0]: e[1] for e in entries}
    remaining = pool_budget - minima
    demand = {e[0]: e[2] for e in entries}
    INF = float("inf")
    order = sorted(
        (e for e in entries if e[2] > 0),
        key=lambda e: (e[3] if e[3] is not None else INF, e[0]),
    )
    while remaining > 0 and order:
        progressed = False
        for sid, _gmin, _dem, _dl in list(order):
            if remaining == 0:
                break
            if demand[sid] > 0:
                grants[sid] += 1
                demand[sid] -= 1
                remaining -= 1
                progressed = True
        order = [e for e in order if demand[e[0]] > 0]
        if not progressed:
            break
    return grants


# ---------------------------------------------------------------------------
# Decentralized parameter selection


def select_params_decentralized(
    busy_fraction_other: float, required_budget: int, capacity: int
) -> int:
    """Per-node slot-budget proposal under shared-channel contention:
    claim no more than the idle share, never drop below one fragment."""
    if not 0.0 <= busy_fraction_other <= 1.0:
        raise ValueError("busy fraction must lie in [0, 1]")
    share = math.floor((1.0 - busy_fraction_other) * capacity)
    return max(1, min(required_budget, share))


def iterate_fair_share(
    capacity: int, required: int, iterations: int = 10, window: int = 2
) -> list[tuple[int, int]]:
    """Fixed-point oracle: two identical greedy nodes observing each
    other's occupancy over a sliding window and re-proposing each round."""
    hist_a: list[int] = []
    hist_b: list[int] = []
    a = b = 0
    out = []
    for _ in range(iterations):
        busy_a = sum(hist_b[-window:]) / (window * capacity) if hist_b else 0.0
        busy_b = sum(hist_a[-window:]) / (window * capacity) if hist_a else 0.0
        a = select_params_decentralized(min(1.0, busy_a), required, capacity)
        b = select_params_decentralized(min(1.0, busy_b), required, capacity)
        hist_a.append(a)
        hist_b.append(b)
        out.append((a, b))
    return out


# ---------------------------------------------------------------------------
# Reconfiguration protocol


class NodeStatus(Enum):
    ACTIVE = "active"
    FAIL_SILENT = "fail_silent"


class ReconfigOutcome(Enum):
    COMMITTED = "committed"
    ABORTED = "aborted"


@dataclass(frozen=True)
class RmHeartbeat:
    node_id: str
    mode_id: int
    frame_bytes: int = CONTROL_MSG_BYTES


@dataclass(frozen=True)
class ModePrepare:
    mode: Mode
    barrier_time: int
    frame_bytes: int = CONTROL_MSG_BYTES


@dataclass(frozen=True)
class ModeAck:
    node_id: str
    mode_id: int
    frame_bytes: int = CONTROL_MSG_BYTES


@dataclass(frozen=True)
class ModeCommit:
    mode_id: int
    frame_bytes: int = CONTROL_MSG_BYTES


@dataclass(frozen=True)
class ModeAbort:
    mode_id: int
    frame_bytes: int = CONTROL_MSG_BYTES


class _Proposal:
    __slots__ = ("mode", "barrier_time", "commit_received", "aborted", "barrier_event")

    def __init__(self, mode, barrier_time):
        self.mode = mode
        self.barrier_time = barrier_time
        self.commit_received = False
        self.aborted = False
        self.barrier_event = None


class RmNode:
    """Per-node resource-management agent."""

    def __init__(
        self,
        engine: Engine,
        node_id: str,
        uplink,
        writers: list,
        run_stats: RunStats,
        hb_period_us: int,
        miss_threshold: int,
        hb_margin_us: int = 100,
    ):
        self.engine = engine
        self.node_id = node_id
        self.uplink = uplink  # sends control messages to the controller
        self.writers = writers
        self.run_stats = run_stats
        self.hb_period_us = hb_period_us
        self.miss_threshold = miss_threshold
        self.hb_margin_us = hb_margin_us
        self.status = NodeStatus.ACTIVE
        self.mode_id = 0
        self.proposal: _Proposal | None = None
        self._misses = 0
        self._hb_timeout_event = None

    def start(self) -> None:
        self.engine.schedule_in(self.hb_period_us, self._send_heartbeat)
        self._arm_hb_timeout()

    # -- heartbeats --

    def _send_heartbeat(self) -> None:
        self.uplink.send_control(RmHeartbeat(self.node_id, self.mode_id))
        self.engine.schedule_in(self.hb_period_us, self._send_heartbeat)

    def _arm_hb_timeout(self) -> None:
        if self._hb_timeout_event is not None:
            self._hb_timeout_event.cancel()
        self._hb_timeout_event = self.engine.schedule_in(
            self.hb_period_us + self.hb_margin_us, self._hb_timeout
        )

    def on_controller_heartbeat(self, hb: RmHeartbeat) -> None:
        self._misses = 0
        self._arm_hb_timeout()

    def _hb_timeout(self) -> None:
        self._misses += 1
        if self._misses >= self.miss_threshold:
            self._hb_timeout_event = None
            self.fail_silent("controller heartbeats lost")
            return
        self._hb_timeout_event = self.engine.schedule_in(
            self.hb_period_us, self._hb_timeout
        )

    # -- reconfiguration --

    def on_prepare(self, msg: ModePrepare) -> None:
        if self.proposal is not None and self.proposal.mode.mode_id != msg.mode.mode_id:
            return  # acts on at most one proposed mode at a time
        if self.proposal is None:
            self.proposal = _Proposal(msg.mode, msg.barrier_time)
            self.proposal.barrier_event = self.engine.schedule_at(
                msg.barrier_time, self._at_barrier
            )
        # Re-ack every (re)transmission: the previous ack may have been lost.
        self.uplink.send_control(ModeAck(self.node_id, msg.mode.mode_id))

    def on_commit(self, msg: ModeCommit) -> None:
        if self.proposal is not None and self.proposal.mode.mode_id == msg.mode_id:
            self.proposal.commit_received = True

    def on_abort(self, msg: ModeAbort) -> None:
        if self.proposal is not None and self.proposal.mode.mode_id == msg.mode_id:
            self.proposal.aborted = True

    def _at_barrier(self) -> None:
        proposal = self.proposal
        self.proposal = None
        if proposal is None:
            return
        if proposal.aborted:
            return  # effective configuration identical to the pre-run state
        if proposal.commit_received:
            self._apply_mode(proposal.mode)
        else:
            # Acked the prepare but cannot confirm the outcome: never run a
            # potentially stale mode.
            self.fail_silent("missed commit by barrier")

    def _apply_mode(self, mode: Mode) -> None:
        self.mode_id = mode.mode_id
        for writer in self.writers:
            # Every stream participates in every mode; an absent override
            # just means its parameters carry over unchanged.
            writer.mode_id = mode.mode_id
            ov = mode.override_for(writer.stream_id)
            if ov is None:
                continue
            if ov.slot_budget is not None:
                writer.slot_budget = ov.slot_budget
            if ov.fragment_size is not None and hasattr(writer, "active_fragment_size"):
                writer.active_fragment_size = ov.fragment_size
            if ov.sample_deadline_us is not None and hasattr(
                writer, "active_deadline_us"
            ):
                writer.active_deadline_us = ov.sample_deadline_us
        # A committed switch re-synchronizes the node: it may resume.
        if self.status is NodeStatus.FAIL_SILENT:
            self.status = NodeStatus.ACTIVE
        for writer in self.writers:
            writer.enabled = True
            if writer.driver is not None and writer.sendable_count():
                writer.driver.wake()

    def fail_silent(self, reason: str) -> None:
        if self.status is NodeStatus.FAIL_SILENT:
            return
        self.status = NodeStatus.FAIL_SILENT
        self.run_stats.fail_silent_events += 1
        for writer in self.writers:
            writer.enabled = False


class Controller:
    """Central RM controller: admission above, per-slot slack below, and
    the reconfiguration protocol in between."""

    def __init__(
        self,
        engine: Engine,
        node_ids: list[str],
        downlinks: dict,
        run_stats: RunStats,
        hb_period_us: int,
        miss_threshold: int,
        retry_period_us: int,
        commit_margin_us: int | None = None,
        hb_margin_us: int = 100,
    ):
        self.engine = engine
        self.node_ids = list(node_ids)
        self.downlinks = downlinks  # node_id -> object with send_control()
        self.run_stats = run_stats
        self.hb_period_us = hb_period_us
        self.miss_threshold = miss_threshold
        self.retry_period_us = retry_period_us
        self.commit_margin_us = (
            commit_margin_us if commit_margin_us is not None else 3 * retry_period_us
        )
        self.hb_margin_us = hb_margin_us
        self.mode_id = 0
        self.current_mode: Mode | None = None
        self.lost_nodes: set[str] = set()
        self.committed_timeline: list[tuple[int, int]] = [(0, 0)]
        self._run = None
        self._monitors: dict[str, dict] = {}

    def start(self) -> None:
        for node_id in self.node_ids:
            self._monitors[node_id] = {"misses": 0, "event": None}
            self._arm_monitor(node_id)
        self.engine.schedule_in(self.hb_period_us, self._send_heartbeats)

    # -- liveness monitoring --

    def _send_heartbeats(self) -> None:
        for node_id in self.node_ids:
            if node_id in self.lost_nodes:
                continue  # quarantined: silence drives the node fail-silent
            self.downlinks[node_id].send_control(RmHeartbeat("controller", self.mode_id))
        self.engine.schedule_in(self.hb_period_us, self._send_heartbeats)

    def _arm_monitor(self, node_id: str, first: bool = True) -> None:
        mon = self._monitors[node_id]
        if mon["event"] is not None:
            mon["event"].cancel()
        delay = self.hb_period_us + (self.hb_margin_us if first else 0)
        mon["event"] = self.engine.schedule_in(delay, self._monitor_timeout, node_id)

    def on_node_heartbeat(self, hb: RmHeartbeat) -> None:
        mon = self._monitors.get(hb.node_id)
        if mon is None or hb.node_id in self.lost_nodes:
            return
        mon["misses"] = 0
        self._arm_monitor(hb.node_id)

    def _monitor_timeout(self, node_id: str) -> None:
        mon = self._monitors[node_id]
        mon["misses"] += 1
        if mon["misses"] >= self.miss_threshold:
            mon["event"] = None
            self.lost_nodes.add(node_id)
            return
        mon["event"] = self.engine.schedule_in(
            self.hb_period_us, self._monitor_timeout, node_id
        )

    # -- reconfiguration --

    def reconfigure(self, new_mode: Mode, barrier_delay_us: int, done_cb=None) -> None:
        if new_mode.mode_id != self.mode_id + 1:
            raise ValueError(
                "mode_id must advance by one (current %d, proposed %d)"
                % (self.mode_id, new_mode.mode_id)
            )
        if self._run is not None:
            raise RuntimeError("a reconfiguration is already in progress")
        if barrier_delay_us <= self.commit_margin_us:
            raise ValueError("barrier must lie beyond the commit margin")
        now = self.engine.now
        barrier = now + barrier_delay_us
        targets = [n for n in self.node_ids if n not in self.lost_nodes]
        self._run = {
            "mode": new_mode,
            "barrier": barrier,
            "targets": targets,
            "acks": set(),
            "decided": None,
            "retry_events": {},
            "done_cb": done_cb,
        }
        for node_id in targets:
            self._send_prepare(node_id)
        self.engine.schedule_at(barrier - self.commit_margin_us, self._decision_point)
        self.engine.schedule_at(barrier, self._finalize)

    def _send_prepare(self, node_id: str) -> None:
        run = self._run
        if run is None or run["decided"] is not None or node_id in run["acks"]:
            return
        self.downlinks[node_id].send_control(ModePrepare(run["mode"], run["barrier"]))
        run["retry_events"][node_id] = self.engine.schedule_in(
            self.retry_period_us, self._send_prepare, node_id
        )

    def on_mode_ack(self, ack: ModeAck) -> None:
        run = self._run
        if run is None or ack.mode_id != run["mode"].mode_id:
            return
        if ack.node_id in run["acks"]:
            return
        run["acks"].add(ack.node_id)
        ev = run["retry_events"].pop(ack.node_id, None)
        if ev is not None:
            ev.cancel()
        if run["decided"] is None and run["acks"] >= set(run["targets"]):
            self._decide(ReconfigOutcome.COMMITTED)

    def _decision_point(self) -> None:
        run = self._run
        if run is not None and run["decided"] is None:
            self._decide(ReconfigOutcome.ABORTED)

    def _decide(self, outcome: ReconfigOutcome) -> None:
        run = self._run
        run["decided"] = outcome
        for ev in run["retry_events"].values():
            ev.cancel()
        run["retry_events"].clear()
        if outcome is ReconfigOutcome.COMMITTED:
            self._broadcast_outcome(ModeCommit(run["mode"].mode_id))
        else:
            self._broadcast_outcome(ModeAbort(run["mode"].mode_id))

    def _broadcast_outcome(self, msg) -> None:
        run = self._run
        if run is None or self.engine.now >= run["barrier"]:
            return
        for node_id in run["targets"]:
            self.downlinks[node_id].send_control(msg)
        self.engine.schedule_in(self.retry_period_us, self._broadcast_outcome, msg)

    def _finalize(self) -> None:
        run = self._run
        self._run = None
        outcome = run["decided"] or ReconfigOutcome.ABORTED
        if outcome is ReconfigOutcome.COMMITTED:
            self.mode_id = run["mode"].mode_id
            self.current_mode = run["mode"]
            self.committed_timeline.append((run["barrier"], self.mode_id))
            self.run_stats.reconfig_committed += 1
        else:
            self.run_stats.reconfig_aborted += 1
        if run["done_cb"] is not None:
            run["done_cb"](outcome)


class ControlDownlink:
    """Controller -> node control path over a lossy link."""

    def __init__(self, engine: Engine, link, node: RmNode):
        self.engine = engine
        self.link = link
        self.node = node

    def send_control(self, msg) -> None:
        if self.link.try_send(msg.frame_bytes):
            self.engine.schedule_in(self.link.latency_us, self._deliver, msg)

    def _deliver(self, msg) -> None:
        node = self.node
        if isinstance(msg, RmHeartbeat):
            node.on_controller_heartbeat(msg)
        elif isinstance(msg, ModePrepare):
            node.on_prepare(msg)
        elif isinstance(msg, ModeCommit):
            node.on_commit(msg)
        elif isinstance(msg, ModeAbort):
            node.on_abort(msg)


class ControlUplink:
    """Node -> controller control path over a lossy link."""

    def __init__(self, engine: Engine, link, controller: Controller):
        self.engine = engine
        self.link = link
        self.controller = controller

    def send_control(self, msg) -> None:
        if self.link.try_send(msg.frame_bytes):
            self.engine.schedule_in(self.link.latency_us, self._deliver, msg)

    def _deliver(self, msg) -> None:
        if isinstance(msg, RmHeartbeat):
            self.controller.on_node_heartbeat(msg)
        elif isinstance(msg, ModeAck):
            self.controller.on_mode_ack(msg)


class ModeAudit:
    """Continuous safety checker for mode consistency.

    Registered as an engine instant hook: once every event at a timestamp
    has drained, all ACTIVE nodes must agree on one mode id. Data-plane
    transmissions are checked against the controller's committed timeline;
    a switch instant accepts both the outgoing and incoming mode.
    """

    def __init__(self, controller: Controller, nodes: list[RmNode], run_stats: RunStats):
        self.controller = controller
        self.nodes = nodes
        self.run_stats = run_stats
        self.violations: list = []

    def committed_mode_at(self, t: int) -> tuple[int, int]:
        """(mode_id, effective_from) in force at time t."""
        timeline = self.controller.committed_timeline
        current = timeline[0]
        for eff, mid in timeline:
            if eff <= t:
                current = (eff, mid)
            else:
                break
        return current[1], current[0]

    def check_instant(self, t: int) -> None:
        modes = {n.mode_id for n in self.nodes if n.status is NodeStatus.ACTIVE}
        if len(modes) > 1:
            self.run_stats.mode_violations += 1
            self.violations.append(("inconsistent_active_modes", t, sorted(modes)))

    def audit_transmission(self, now: int, mode_id: int, count: int) -> None:
        committed, effective_from = self.committed_mode_at(now)
        if mode_id == committed:
            return
        if now == effective_from:
            return  # boundary instant: either side of the switch is fine
        # A transmission under the previous mode is stale only after the
        # barrier has passed.
        self.run_stats.mode_violations += 1
        self.violations.append(("stale_mode_transmission", now, mode_id, committed))
