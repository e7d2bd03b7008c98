"""Scenario execution: wiring, batch sweeps and CSV assembly.

A run is a pure function of (scenario config, seed): per-link RNG
streams are derived from the seed and stable link labels, events fire
in deterministic order, and rows come out sorted, so reruns produce
byte-identical CSV.
"""

from __future__ import annotations

import copy
import itertools
import random
from concurrent.futures import ProcessPoolExecutor

from . import codec as codec_mod
from .baseline import BaselineDownlink, BaselineReader, BaselineUplink, BaselineWriter
from .channel import BerLoss, GilbertElliot, IidLoss, Link, Lossless, derive_seed
from .control import (
    Controller,
    ControlDownlink,
    ControlUplink,
    ModeAudit,
    RmNode,
    StreamOverride,
    make_mode,
)
from .engine import Engine
from .handover import ApPath, ConnectivitySet, HandoverDownlink, HandoverUplink
from .metrics import ReaderStats, RunStats, WriterStats, rows_to_csv, stream_rows
from .multicast import MulticastDownlink, MulticastWriter, ReaderEntry
from .scenario import Scenario, scenario_from_dict
from .stream import Sample
from .transport import Reader, SlotDriver, UnicastDownlink, UnicastUplink, Writer


def make_channel(spec):
    if spec.kind == "lossless":
        return Lossless()
    if spec.kind == "iid":
        return IidLoss(spec.p_loss)
    if spec.kind == "ber":
        return BerLoss(spec.ber)
    return GilbertElliot(spec.p_g2b, spec.p_b2g, spec.loss_good, spec.loss_bad)


class _StreamRuntime:
    """Everything belonging to one stream inside a running sim."""

    def __init__(self, spec):
        self.spec = spec
        self.writer = None
        self.readers: dict[str, object] = {}
        self.writer_stats = WriterStats()
        self.reader_stats: dict[str, ReaderStats] = {}
        self.data_links: dict[str, list[Link]] = {}
        self.payload_errors = 0
        self.encoded_sizes: list[int] = []


class Sim:
    """One wired scenario instance; build once, run once."""

    def __init__(self, scn: Scenario, seed: int):
        self.scn = scn
        self.seed = seed
        self.engine = Engine()
        self.run_stats = RunStats()
        self.links: dict[tuple[str, str], Link] = {}
        self.streams: dict[str, _StreamRuntime] = {}
        self.drivers: dict[str, SlotDriver] = {}
        self.connectivity = None
        self.controller = None
        self.rm_nodes: dict[str, RmNode] = {}
        self.audit = None
        self._build()

    # -- construction -----------------------------------------------------

    def _make_link(self, label: str, channel_spec, propagation_us: int) -> Link:
        rng = random.Random(derive_seed(self.seed, label))
        return Link(label, make_channel(channel_spec), propagation_us, rng)

    def _declared_link(self, src: str, dst: str) -> Link:
        return self.links[(src, dst)]

    def _feedback_link(self, src: str, dst: str) -> Link:
        """Reverse path dst->src; auto-twin of the forward link unless
        explicitly declared."""
        if (dst, src) in self.links:
            return self.links[(dst, src)]
        for spec in self.scn.links:
            if spec.src == src and spec.dst == dst:
                link = self._make_link(
                    "%s->%s" % (dst, src), spec.channel, spec.propagation_us
                )
                self.links[(dst, src)] = link
                return link
        raise KeyError("no link declared between %s and %s" % (src, dst))

    def _build(self) -> None:
        scn = self.scn
        for spec in scn.links:
            label = "%s->%s" % (spec.src, spec.dst)
            self.links[(spec.src, spec.dst)] = self._make_link(
                label, spec.channel, spec.propagation_us
            )
        if scn.handover is not None:
            self._build_handover()
        for spec in scn.streams:
            self._build_stream(spec)
        if scn.control is not None:
            self._build_control()
        for node, driver in self.drivers.items():
            pool = scn.slack_pools.get(node)
            if pool is not None and len(driver.writers) > 1:
                driver.pool = (pool.pool_budget, dict(pool.minima))

    def _build_handover(self) -> None:
        ho = self.scn.handover
        paths = {}
        for ap in ho.aps:
            link = self._make_link("ap:%s" % ap.ap_id, ap.channel, ap.propagation_us)
            rev = self._make_link(
                "ap:%s~rev" % ap.ap_id, ap.channel, ap.propagation_us
            )
            paths[ap.ap_id] = ApPath(ap.ap_id, link, rev, ap.backbone_latency_us)
        self.connectivity = ConnectivitySet(
            engine=self.engine,
            paths=paths,
            preference=tuple(ho.preference),
            switch_latency_us=ho.switch_latency_us,
            run_stats=self.run_stats,
        )
        self.connectivity.attach_monitors(
            ho.probe_period_us, ho.probe_miss_threshold, ho.probe_timeout_us
        )
        for outage in ho.outages:
            self.engine.schedule_at(
                outage.down_at_us, self.connectivity.script_link_down, outage.ap_id
            )
            if outage.up_at_us:
                self.engine.schedule_at(
                    outage.up_at_us, self.connectivity.script_link_up, outage.ap_id
                )

    def _driver_for(self, node: str, arbitration_us: int) -> SlotDriver:
        driver = self.drivers.get(node)
        if driver is None:
            driver = SlotDriver(self.engine, arbitration_us)
            self.drivers[node] = driver
        return driver

    def _build_stream(self, spec) -> None:
        rt = _StreamRuntime(spec)
        self.streams[spec.id] = rt
        cfg = spec.config.build()
        ctrl_lossless = self.scn.transport_control_lossless
        uses_handover = (
            self.scn.handover is not None and spec.writer == self.scn.handover.mobile
        )

        if spec.protocol == "packet_bec":
            reader_id = spec.readers[0]
            stats = ReaderStats()
            rt.reader_stats[reader_id] = stats
            link = self._declared_link(spec.writer, reader_id)
            rev = self._feedback_link(spec.writer, reader_id)
            rt.data_links[reader_id] = [link]
            reader = BaselineReader(self.engine, spec.id, reader_id, None, stats)
            writer = BaselineWriter(
                self.engine,
                cfg,
                spec.id,
                BaselineDownlink(self.engine, link, reader, cfg.arbitration_us),
                rt.writer_stats,
                retry_limit=spec.retry_limit,
                ack_timeout_us=spec.ack_timeout_us
                or 2 * link.propagation_us + 3 * cfg.arbitration_us,
            )
            writer.active_deadline_us = cfg.sample_deadline_us
            reader.uplink = BaselineUplink(self.engine, rev, writer, ctrl_lossless)
            rt.writer = writer
            rt.readers[reader_id] = reader
        elif len(spec.readers) == 1 or uses_handover:
            reader_id = spec.readers[0]
            stats = ReaderStats()
            rt.reader_stats[reader_id] = stats
            reader = Reader(
                self.engine,
                cfg,
                spec.id,
                reader_id,
                None,
                stats,
                keep_payload=spec.payload_check or spec.codec is not None,
            )
            if uses_handover:
                downlink = HandoverDownlink(
                    self.engine,
                    self.connectivity,
                    reader,
                    ctrl_lossless,
                    tx_time_us=cfg.arbitration_us,
                )
                rt.data_links[reader_id] = [
                    p.link for p in self.connectivity.paths.values()
                ]
                writer = Writer(
                    self.engine, cfg, spec.id, downlink, rt.writer_stats, spec.scheduler
                )
                reader.uplink = HandoverUplink(
                    self.engine, self.connectivity, writer, ctrl_lossless
                )
            else:
                link = self._declared_link(spec.writer, reader_id)
                rev = self._feedback_link(spec.writer, reader_id)
                rt.data_links[reader_id] = [link]
                writer = Writer(
                    self.engine,
                    cfg,
                    spec.id,
                    UnicastDownlink(
                        self.engine, link, reader, ctrl_lossless, cfg.arbitration_us
                    ),
                    rt.writer_stats,
                    spec.scheduler,
                )
                reader.uplink = UnicastUplink(self.engine, rev, writer, ctrl_lossless)
            rt.writer = writer
            rt.readers[reader_id] = reader
        else:
            entries = []
            targets = []
            for rank, reader_id in enumerate(spec.readers):
                stats = ReaderStats()
                rt.reader_stats[reader_id] = stats
                link = self._declared_link(spec.writer, reader_id)
                rt.data_links[reader_id] = [link]
                reader = Reader(
                    self.engine,
                    cfg,
                    spec.id,
                    reader_id,
                    None,
                    stats,
                    nack_delay_us=rank * spec.nack_stagger_us,
                    keep_payload=spec.payload_check,
                )
                rt.readers[reader_id] = reader
                entries.append(
                    ReaderEntry(
                        reader_id,
                        rank,
                        spec.reader_priorities.get(reader_id, 0),
                        link,
                    )
                )
                targets.append((link, reader))
            downlink = MulticastDownlink(
                self.engine, targets, ctrl_lossless, tx_time_us=cfg.arbitration_us
            )
            writer = MulticastWriter(
                self.engine,
                cfg,
                spec.id,
                downlink,
                entries,
                rt.writer_stats,
                stale_after_us=spec.stale_after_hb * cfg.heartbeat_period_us,
            )
            for rank, reader_id in enumerate(spec.readers):
                rev = self._feedback_link(spec.writer, reader_id)
                rt.readers[reader_id].uplink = UnicastUplink(
                    self.engine, rev, writer, ctrl_lossless
                )
            rt.writer = writer

        driver = self._driver_for(spec.writer, cfg.arbitration_us)
        driver.add_writer(rt.writer)
        if spec.codec is not None:
            self._start_codec_generator(rt, cfg)
        else:
            self._start_generator(rt, cfg)
        if spec.payload_check and spec.codec is None:
            for reader in rt.readers.values():
                if isinstance(reader, Reader):
                    reader.deliver_cb = self._make_verifier(rt)

    # -- generators ----------------------------------------------------------

    def _payload_for(self, stream_id: str, seq: int, size: int) -> bytes:
        rng = random.Random(derive_seed(self.seed, "payload:%s:%d" % (stream_id, seq)))
        return rng.randbytes(size)

    def _make_verifier(self, rt: _StreamRuntime):
        def verify(reader, st):
            expected = self._payload_for(rt.spec.id, st.seq, rt.spec.config.sample_size)
            if reader.reassembled_payload(st) != expected:
                rt.payload_errors += 1

        return verify

    def _start_generator(self, rt: _StreamRuntime, cfg) -> None:
        spec = rt.spec

        def generate(seq: int) -> None:
            now = self.engine.now
            deadline_us = getattr(rt.writer, "active_deadline_us", None)
            if deadline_us is None:
                deadline_us = cfg.sample_deadline_us
            payload = (
                self._payload_for(spec.id, seq, cfg.sample_size)
                if spec.payload_check
                else None
            )
            sample = Sample(
                stream_id=spec.id,
                seq=seq,
                size=cfg.sample_size,
                t_gen=now,
                t_deadline=now + deadline_us,
                payload=payload,
            )
            rt.writer.on_new_sample(sample, now)
            if seq + 1 < spec.samples:
                self.engine.schedule_in(cfg.sample_period_us, generate, seq + 1)

        self.engine.schedule_at(spec.start_us, generate, 0)

    def _start_codec_generator(self, rt: _StreamRuntime, cfg) -> None:
        spec = rt.spec
        cd = spec.codec
        rng = random.Random(derive_seed(self.seed, "codec:%s" % spec.id))
        cells = cd.width * cd.height
        state = {
            "prev": None,
            "receiver_holds": -1,
        }
        rects = [codec_mod.RoiRect(**r) for r in cd.roi]

        def reader_delivered(reader, st):
            state["receiver_holds"] = max(state["receiver_holds"], st.seq)

        for reader in rt.readers.values():
            reader.deliver_cb = reader_delivered

        def next_frame(prev):
            if prev is None:
                data = rng.randbytes(cells * cd.cell_bytes)
                return codec_mod.GridFrame(cd.width, cd.height, cd.cell_bytes, data)
            changed = max(1, int(cells * cd.change_fraction))
            data = bytearray(prev.data)
            for idx in sorted(rng.sample(range(cells), changed)):
                off = idx * cd.cell_bytes
                data[off : off + cd.cell_bytes] = rng.randbytes(cd.cell_bytes)
            return codec_mod.GridFrame(cd.width, cd.height, cd.cell_bytes, bytes(data))

        def generate(seq: int) -> None:
            now = self.engine.now
            frame = next_frame(state["prev"])
            has_base = state["prev"] is not None and state["receiver_holds"] == seq - 1
            _, encoded = codec_mod.choose_encoding(
                state["prev"], frame, rects, has_base, base_seq=seq - 1
            )
            state["prev"] = frame
            rt.encoded_sizes.append(len(encoded))
            sample = Sample(
                stream_id=spec.id,
                seq=seq,
                size=len(encoded),
                t_gen=now,
                t_deadline=now + cfg.sample_deadline_us,
                payload=encoded,
            )
            rt.writer.on_new_sample(sample, now)
            if seq + 1 < spec.samples:
                self.engine.schedule_in(cfg.sample_period_us, generate, seq + 1)

        self.engine.schedule_at(spec.start_us, generate, 0)

    # -- control plane ----------------------------------------------------------

    def _build_control(self) -> None:
        ctl = self.scn.control
        downlinks = {}
        for node in ctl.nodes:
            down = self._make_link("rm:%s" % node, ctl.channel, ctl.propagation_us)
            up = self._make_link("rm:%s~up" % node, ctl.channel, ctl.propagation_us)
            self.links[("rm-controller", node)] = down
            self.links[(node, "rm-controller")] = up
            writers = [
                rt.writer for rt in self.streams.values() if rt.spec.writer == node
            ]
            agent = RmNode(
                self.engine,
                node,
                None,
                writers,
                self.run_stats,
                ctl.hb_period_us,
                ctl.miss_threshold,
                ctl.hb_margin_us,
            )
            self.rm_nodes[node] = agent
            downlinks[node] = ControlDownlink(self.engine, down, agent)
        self.controller = Controller(
            self.engine,
            list(ctl.nodes),
            downlinks,
            self.run_stats,
            ctl.hb_period_us,
            ctl.miss_threshold,
            ctl.effective_retry_period(),
            ctl.effective_commit_margin(),
            ctl.hb_margin_us,
        )
        for node in ctl.nodes:
            up = self.links[(node, "rm-controller")]
            self.rm_nodes[node].uplink = ControlUplink(self.engine, up, self.controller)
        self.audit = ModeAudit(
            self.controller, list(self.rm_nodes.values()), self.run_stats
        )
        self.engine.instant_hooks.append(self.audit.check_instant)
        for agent in self.rm_nodes.values():
            for writer in agent.writers:
                writer.transmit_audit = self.audit.audit_transmission
        self.controller.start()
        for agent in self.rm_nodes.values():
            agent.start()
        for rc in ctl.reconfigurations:
            self.engine.schedule_at(rc.at_us, self._scripted_reconfig, rc)

    def _scripted_reconfig(self, rc) -> None:
        overrides = {
            sid: StreamOverride(**fields) for sid, fields in sorted(rc.overrides.items())
        }
        mode = make_mode(self.controller.mode_id + 1, overrides)
        self.controller.reconfigure(mode, rc.barrier_delay_us)

    # -- execution ----------------------------------------------------------

    def run(self) -> None:
        self.engine.run_until(self.scn.derived_duration_us())

    def rows(self, param_values: dict | None = None) -> list[dict]:
        params = param_values or {}
        out = []
        for spec in self.scn.streams:
            rt = self.streams[spec.id]
            link_counts = {
                reader_id: (
                    sum(l.sent for l in links),
                    sum(l.delivered for l in links),
                )
                for reader_id, links in rt.data_links.items()
            }
            out.extend(
                stream_rows(
                    self.scn.name,
                    self.seed,
                    params,
                    spec.id,
                    rt.writer_stats,
                    rt.reader_stats,
                    link_counts,
                    self.run_stats,
                )
            )
        return out


def run_scenario(scn: Scenario, seed: int, param_values: dict | None = None):
    """Execute one (scenario, seed) run; returns (rows, sim)."""
    sim = Sim(scn, seed)
    sim.run()
    return sim.rows(param_values), sim


def grid_points(grid: dict[str, list]) -> list[dict]:
    """Cross product of the grid, outermost key first, order-preserving."""
    if not grid:
        return [{}]
    keys = list(grid)
    return [
        dict(zip(keys, combo))
        for combo in itertools.product(*(grid[k] for k in keys))
    ]


def _run_point(args):
    point_idx, raw, point, seed = args
    for key, value in point.items():
        from .scenario import apply_override

        apply_override(raw, key, value)
    scn = scenario_from_dict(raw)
    rows, _ = run_scenario(scn, seed, dict(point))
    return point_idx, seed, rows


def sweep(
    base_raw: dict,
    grid: dict[str, list],
    seeds: list[int],
    jobs: int = 1,
) -> tuple[list[dict], list[str]]:
    """Run grid x seeds; rows are ordered by (grid point, seed) no matter
    how execution interleaves."""
    if not seeds:
        raise ValueError("seed list must not be empty")
    points = grid_points(grid)
    tasks = [
        (idx, copy.deepcopy(base_raw), point, seed)
        for idx, point in enumerate(points)
        for seed in seeds
    ]
    results = []
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_point, tasks))
    else:
        results = [_run_point(task) for task in tasks]
    results.sort(key=lambda r: (r[0], r[1]))
    rows = [row for _, _, chunk in results for row in chunk]
    return rows, list(grid)


def sweep_csv(base_raw, grid, seeds, jobs=1) -> str:
    rows, param_cols = sweep(base_raw, grid, seeds, jobs)
    return rows_to_csv(rows, param_cols)
