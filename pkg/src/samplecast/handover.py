"""Multi-connectivity handover: monitor every AP link, stream on one.

Alternative routes over the fixed-latency backbone are computed at
scenario start and never touched again, so a failover consults only a
frozen preference list: detection of the dead link plus the backbone
switch time bound the outage deterministically. In-flight losses are
repaired by the transport's normal NACK path on the new link; no
transport state is reset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .engine import Engine
from .metrics import RunStats
from .stream import PROBE_BYTES

LINK_UP = "up"
LINK_DOWN = "down"


@dataclass
class ApPath:
    """One access-point attachment: wireless hop plus backbone tail."""

    ap_id: str
    link: object  # mobile -> infrastructure (data direction)
    reverse_link: object  # infrastructure -> mobile (feedback direction)
    backbone_latency_us: int = 0


def downtime_bound(
    probe_miss_threshold: int,
    probe_period_us: int,
    probe_timeout_us: int,
    switch_latency_us: int,
) -> int:
    """Worst-case outage: consecutive probe misses, the last probe's
    timeout allowance, then the backbone switch."""
    return (
        probe_miss_threshold * probe_period_us + probe_timeout_us + switch_latency_us
    )


class LinkMonitor:
    """Probe one AP link continuously; declare DOWN after k consecutive
    probe losses and UP again after k consecutive successes."""

    def __init__(
        self,
        engine: Engine,
        path: ApPath,
        probe_period_us: int,
        miss_threshold: int,
        probe_timeout_us: int,
        verdict_cb,
    ):
        self.engine = engine
        self.path = path
        self.probe_period_us = probe_period_us
        self.miss_threshold = miss_threshold
        self.probe_timeout_us = probe_timeout_us
        self.verdict_cb = verdict_cb
        self.state = LINK_UP
        self._consec_miss = 0
        self._consec_succ = 0
        self._echoed: set[int] = set()
        self._probe_idx = 0

    def start(self, phase_us: int = 0) -> None:
        self.engine.schedule_in(phase_us, self._probe)

    def _probe(self) -> None:
        idx = self._probe_idx
        self._probe_idx += 1
        out_ok = self.path.link.try_send(PROBE_BYTES)
        if out_ok and self.path.reverse_link.try_send(PROBE_BYTES):
            rtt = self.path.link.propagation_us + self.path.reverse_link.propagation_us
            self.engine.schedule_in(rtt, self._echo, idx)
        self.engine.schedule_in(self.probe_timeout_us, self._check, idx)
        self.engine.schedule_in(self.probe_period_us, self._probe)

    def _echo(self, idx: int) -> None:
        self._echoed.add(idx)

    def _check(self, idx: int) -> None:
        if idx in self._echoed:
            self._echoed.discard(idx)
            self._consec_miss = 0
            self._consec_succ += 1
            if self.state == LINK_DOWN and self._consec_succ >= self.miss_threshold:
                self.state = LINK_UP
                self.verdict_cb(self.path.ap_id, True)
        else:
            self._consec_succ = 0
            self._consec_miss += 1
            if self.state == LINK_UP and self._consec_miss >= self.miss_threshold:
                self.state = LINK_DOWN
                self.verdict_cb(self.path.ap_id, False)


@dataclass
class ConnectivitySet:
    """All AP attachments of one mobile node; exactly one carries data."""

    engine: Engine
    paths: dict[str, ApPath]
    preference: tuple  # frozen at scenario start: no in-failover routing
    switch_latency_us: int
    run_stats: RunStats
    monitors: dict[str, LinkMonitor] = field(default_factory=dict)

    def __post_init__(self):
        if not self.preference:
            raise ValueError("preference list must not be empty")
        for ap_id in self.preference:
            if ap_id not in self.paths:
                raise ValueError("preference names unknown AP %s" % ap_id)
        self.active_ap = self.preference[0]
        self.switching_to: str | None = None
        self.suspended = False
        self._cut_times: dict[str, int] = {}
        self.outage_count = 0
        self.outage_recoveries_us: list[int] = []

    # -- wiring ----------------------------------------------------------

    def attach_monitors(
        self, probe_period_us: int, miss_threshold: int, probe_timeout_us: int
    ) -> None:
        for ap_id, path in self.paths.items():
            mon = LinkMonitor(
                self.engine,
                path,
                probe_period_us,
                miss_threshold,
                probe_timeout_us,
                self.on_verdict,
            )
            self.monitors[ap_id] = mon
            mon.start()

    def active_path(self) -> ApPath:
        return self.paths[self.active_ap]

    # -- outage script ------------------------------------------------------

    def script_link_down(self, ap_id: str) -> None:
        path = self.paths[ap_id]
        path.link.admin_up = False
        path.reverse_link.admin_up = False
        self._cut_times[ap_id] = self.engine.now

    def script_link_up(self, ap_id: str) -> None:
        path = self.paths[ap_id]
        path.link.admin_up = True
        path.reverse_link.admin_up = True

    # -- failover -------------------------------------------------------------

    def on_verdict(self, ap_id: str, up: bool) -> None:
        if not up:
            if ap_id == self.active_ap and self.switching_to is None:
                self._initiate_failover()
            return
        if self.suspended:
            self.suspended = False
            self._begin_switch(ap_id, resume=True)

    def _initiate_failover(self) -> None:
        target = self._next_up_alternative()
        if target is None:
            self.suspended = True
            self.outage_count += 1
            return
        self._begin_switch(target)

    def _next_up_alternative(self) -> str | None:
        for ap_id in self.preference:
            if ap_id == self.active_ap:
                continue
            mon = self.monitors.get(ap_id)
            if mon is not None and mon.state == LINK_UP:
                return ap_id
        return None

    def _begin_switch(self, target: str, resume: bool = False) -> None:
        self.switching_to = target
        self.engine.schedule_in(
            self.switch_latency_us, self._complete_switch, target, resume
        )

    def _complete_switch(self, target: str, resume: bool) -> None:
        failed = self.active_ap
        self.active_ap = target
        self.switching_to = None
        cut = self._cut_times.get(failed)
        if cut is not None:
            duration = self.engine.now - cut
            if resume:
                self.outage_recoveries_us.append(duration)
            else:
                self.run_stats.handover_downtimes_us.append(duration)
        # The target may have died while the backbone was switching; treat
        # that as a fresh loss of the now-active link.
        mon = self.monitors.get(target)
        if mon is not None and mon.state == LINK_DOWN:
            self._initiate_failover()


class HandoverDownlink:
    """Writer-side port that always uses the currently active AP path.

    The single-active invariant holds by construction: one path object is
    consulted per send, so the stream never occupies two wireless links
    in the same slot.
    """

    def __init__(self, engine: Engine, connectivity: ConnectivitySet, reader,
                 control_lossless=False, tx_time_us=0):
        self.engine = engine
        self.connectivity = connectivity
        self.reader = reader
        self.control_lossless = control_lossless
        self.tx_time_us = tx_time_us

    def send_fragments(self, batch, now: int) -> None:
        path = self.connectivity.active_path()
        link = path.link
        survivors = [df for df in batch if link.try_send(df.frame_bytes)]
        if survivors:
            self.engine.schedule_in(
                self.tx_time_us + link.propagation_us + path.backbone_latency_us,
                self.reader.on_fragments,
                survivors,
            )

    def send_heartbeat(self, hb, now: int) -> None:
        path = self.connectivity.active_path()
        if path.link.try_send(hb.frame_bytes, bypass_loss=self.control_lossless):
            self.engine.schedule_in(
                self.tx_time_us + path.link.propagation_us + path.backbone_latency_us,
                self.reader.on_heartbeat,
                hb,
            )


class HandoverUplink:
    """Reader-side feedback port routed through the active AP."""

    def __init__(self, engine: Engine, connectivity: ConnectivitySet, writer,
                 control_lossless=False):
        self.engine = engine
        self.connectivity = connectivity
        self.writer = writer
        self.control_lossless = control_lossless

    def send_nack(self, nack, now: int) -> None:
        path = self.connectivity.active_path()
        link = path.reverse_link
        if link.try_send(nack.frame_bytes, bypass_loss=self.control_lossless):
            self.engine.schedule_in(
                link.propagation_us + path.backbone_latency_us,
                self.writer.on_nack,
                nack,
            )
