"""Scenario configuration: schema, YAML loading and cross-validation.

A scenario file is hierarchical YAML. Every constraint violation is
reported as a structured error naming the offending field and the
constraint, so `validate` can fail usefully before any run starts.
"""

from __future__ import annotations

from typing import Literal, Optional

import yaml
from pydantic import BaseModel, Field, ValidationError, model_validator

from .stream import FRAGMENT_HEADER_BYTES, ConfigError, StreamConfig


class ScenarioError(ValueError):
    """Invalid scenario; `errors` lists 'field: constraint' strings."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


class ChannelSpec(BaseModel):
    kind: Literal["lossless", "iid", "ber", "gilbert_elliot"] = "lossless"
    p_loss: float = Field(default=0.0, ge=0.0, le=1.0)
    ber: float = Field(default=0.0, ge=0.0, le=1.0)
    p_g2b: float = Field(default=0.0, ge=0.0, le=1.0)
    p_b2g: float = Field(default=0.0, ge=0.0, le=1.0)
    loss_good: float = Field(default=0.0, ge=0.0, le=1.0)
    loss_bad: float = Field(default=1.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "gilbert_elliot" and self.p_g2b + self.p_b2g <= 0.0:
            raise ValueError("gilbert_elliot channel needs p_g2b + p_b2g > 0")
        return self


class LinkSpec(BaseModel):
    src: str
    dst: str
    propagation_us: int = Field(default=50, ge=1)
    channel: ChannelSpec = ChannelSpec()


class StreamConfigSpec(BaseModel):
    sample_period_us: int = Field(gt=0)
    sample_deadline_us: int = Field(gt=0)
    sample_size: int = Field(gt=0)
    fragment_size: int = Field(gt=0)
    heartbeat_period_us: int = Field(gt=0)
    retx_timeout_us: int = Field(gt=0)
    arbitration_us: int = Field(gt=0)
    slot_budget: int = Field(ge=1)
    frame_size: int = Field(default=0, ge=0)

    def build(self) -> StreamConfig:
        return StreamConfig(
            sample_period_us=self.sample_period_us,
            sample_deadline_us=self.sample_deadline_us,
            sample_size=self.sample_size,
            fragment_size=self.fragment_size,
            heartbeat_period_us=self.heartbeat_period_us,
            retx_timeout_us=self.retx_timeout_us,
            arbitration_us=self.arbitration_us,
            slot_budget=self.slot_budget,
            frame_size=self.frame_size,
        )


class CodecSpec(BaseModel):
    """Grid-frame generator with data-aware payload reduction."""

    width: int = Field(ge=1)
    height: int = Field(ge=1)
    cell_bytes: int = Field(ge=1)
    change_fraction: float = Field(default=0.05, ge=0.0, le=1.0)
    roi: list[dict] = Field(default_factory=list)  # {x, y, w, h} per rect


class StreamSpec(BaseModel):
    id: str
    writer: str
    readers: list[str] = Field(min_length=1)
    protocol: Literal["sample_bec", "packet_bec"] = "sample_bec"
    scheduler: Literal["edf", "fifo"] = "edf"
    samples: int = Field(gt=0)
    start_us: int = Field(default=0, ge=0)
    payload_check: bool = False
    config: StreamConfigSpec
    reader_priorities: dict[str, int] = Field(default_factory=dict)
    nack_stagger_us: int = Field(default=100, ge=0)
    stale_after_hb: int = Field(default=5, ge=1)
    retry_limit: int = Field(default=1, ge=0)
    ack_timeout_us: int = Field(default=0, ge=0)
    codec: Optional[CodecSpec] = None


class ReconfigSpec(BaseModel):
    at_us: int = Field(ge=0)
    barrier_delay_us: int = Field(gt=0)
    overrides: dict[str, dict] = Field(default_factory=dict)


class ControlSpec(BaseModel):
    controller: str = "rm-controller"
    nodes: list[str] = Field(min_length=1)
    channel: ChannelSpec = ChannelSpec()
    propagation_us: int = Field(default=50, ge=1)
    hb_period_us: int = Field(default=10_000, gt=0)
    miss_threshold: int = Field(default=3, ge=1)
    hb_margin_us: int = Field(default=200, ge=0)
    retry_period_us: int = Field(default=0, ge=0)  # 0 -> hb_period / 2
    commit_margin_us: int = Field(default=0, ge=0)  # 0 -> 3 * retry_period
    reconfigurations: list[ReconfigSpec] = Field(default_factory=list)

    def effective_retry_period(self) -> int:
        return self.retry_period_us or max(1, self.hb_period_us // 2)

    def effective_commit_margin(self) -> int:
        return self.commit_margin_us or 3 * self.effective_retry_period()


class ApSpec(BaseModel):
    ap_id: str
    propagation_us: int = Field(default=25, ge=1)
    backbone_latency_us: int = Field(default=0, ge=0)
    channel: ChannelSpec = ChannelSpec()


class OutageSpec(BaseModel):
    ap_id: str
    down_at_us: int = Field(ge=0)
    up_at_us: int = Field(default=0, ge=0)  # 0 -> stays down

    @model_validator(mode="after")
    def _check(self):
        if self.up_at_us and self.up_at_us <= self.down_at_us:
            raise ValueError("up_at_us must lie after down_at_us")
        return self


class HandoverSpec(BaseModel):
    mobile: str
    aps: list[ApSpec] = Field(min_length=1)
    preference: list[str] = Field(min_length=1)
    probe_period_us: int = Field(default=2000, gt=0)
    probe_miss_threshold: int = Field(default=3, ge=1)
    probe_timeout_us: int = Field(default=100, gt=0)
    switch_latency_us: int = Field(default=1000, ge=0)
    outages: list[OutageSpec] = Field(default_factory=list)


class SlackPoolSpec(BaseModel):
    pool_budget: int = Field(ge=1)
    minima: dict[str, int] = Field(default_factory=dict)


class Scenario(BaseModel):
    name: str
    seed: int = 0
    duration_us: int = Field(default=0, ge=0)  # 0 -> derived from streams
    transport_control_lossless: bool = False
    streams: list[StreamSpec] = Field(min_length=1)
    links: list[LinkSpec] = Field(default_factory=list)
    control: Optional[ControlSpec] = None
    handover: Optional[HandoverSpec] = None
    slack_pools: dict[str, SlackPoolSpec] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _cross_validate(self):
        errors = cross_validate(self)
        if errors:
            raise ValueError("; ".join(errors))
        return self

    def derived_duration_us(self) -> int:
        end = 0
        for s in self.streams:
            end = max(
                end,
                s.start_us
                + s.samples * s.config.sample_period_us
                + s.config.sample_deadline_us,
            )
        if self.control is not None:
            for rc in self.control.reconfigurations:
                end = max(end, rc.at_us + rc.barrier_delay_us + 10_000)
        if self.handover is not None:
            for outage in self.handover.outages:
                end = max(end, outage.down_at_us, outage.up_at_us)
        return (self.duration_us or end) + 1


def cross_validate(scn: Scenario) -> list[str]:
    """Constraints spanning multiple sections; returns error strings."""
    errors: list[str] = []
    stream_ids = [s.id for s in scn.streams]
    if len(set(stream_ids)) != len(stream_ids):
        errors.append("streams: ids must be unique")
    link_pairs = {(l.src, l.dst) for l in scn.links}
    if len(link_pairs) != len(scn.links):
        errors.append("links: duplicate (src, dst) pair")
    mobile = scn.handover.mobile if scn.handover is not None else None

    for s in scn.streams:
        where = "streams.%s" % s.id
        try:
            s.config.build()
        except ConfigError as exc:
            errors.append("%s.config: %s" % (where, exc))
        if s.writer in s.readers:
            errors.append("%s: writer cannot also be a reader" % where)
        if len(set(s.readers)) != len(s.readers):
            errors.append("%s: duplicate readers" % where)
        if s.writer != mobile:
            for reader in s.readers:
                if (s.writer, reader) not in link_pairs:
                    errors.append(
                        "%s: no link declared from %s to %s"
                        % (where, s.writer, reader)
                    )
        if s.protocol == "packet_bec":
            if len(s.readers) > 1:
                errors.append("%s: packet_bec supports a single reader" % where)
            if s.scheduler == "fifo":
                errors.append("%s: scheduler applies to sample_bec only" % where)
        for reader in s.reader_priorities:
            if reader not in s.readers:
                errors.append(
                    "%s.reader_priorities: %s is not a reader" % (where, reader)
                )
        if s.codec is not None:
            full = s.codec.width * s.codec.height * s.codec.cell_bytes + 1
            if s.config.sample_size != full:
                errors.append(
                    "%s.config.sample_size: must equal encoded full frame %d"
                    % (where, full)
                )

    by_writer: dict[str, list[StreamSpec]] = {}
    for s in scn.streams:
        by_writer.setdefault(s.writer, []).append(s)
    for node, streams in by_writer.items():
        arbs = {s.config.arbitration_us for s in streams}
        if len(arbs) > 1:
            errors.append(
                "streams: node %s mixes arbitration_us values %s"
                % (node, sorted(arbs))
            )

    for node, pool in scn.slack_pools.items():
        node_streams = {s.id for s in by_writer.get(node, [])}
        for sid in pool.minima:
            if sid not in node_streams:
                errors.append(
                    "slack_pools.%s.minima: stream %s not on this node" % (node, sid)
                )
        if sum(pool.minima.values()) > pool.pool_budget:
            errors.append(
                "slack_pools.%s: guaranteed minima exceed pool_budget" % node
            )

    if scn.control is not None:
        ctl = scn.control
        margin = ctl.effective_commit_margin()
        for i, rc in enumerate(ctl.reconfigurations):
            where = "control.reconfigurations.%d" % i
            if rc.barrier_delay_us <= margin:
                errors.append(
                    "%s.barrier_delay_us: must exceed commit margin %d"
                    % (where, margin)
                )
            for sid in rc.overrides:
                if sid not in stream_ids:
                    errors.append("%s.overrides: unknown stream %s" % (where, sid))

    if scn.handover is not None:
        ho = scn.handover
        ap_ids = [ap.ap_id for ap in ho.aps]
        if len(set(ap_ids)) != len(ap_ids):
            errors.append("handover.aps: duplicate ap_id")
        for ap_id in ho.preference:
            if ap_id not in ap_ids:
                errors.append("handover.preference: unknown AP %s" % ap_id)
        for i, outage in enumerate(ho.outages):
            if outage.ap_id not in ap_ids:
                errors.append("handover.outages.%d: unknown AP %s" % (i, outage.ap_id))
        if ho.mobile not in by_writer:
            errors.append("handover.mobile: %s hosts no stream writer" % ho.mobile)
    return errors


def scenario_from_dict(raw: dict) -> Scenario:
    try:
        return Scenario.model_validate(raw)
    except ValidationError as exc:
        errors = [
            "%s: %s" % (".".join(str(p) for p in err["loc"]), err["msg"])
            for err in exc.errors()
        ]
        raise ScenarioError(errors) from exc


def load_scenario(text: str) -> Scenario:
    """Parse scenario YAML text into a validated Scenario."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(["yaml: %s" % exc]) from exc
    if not isinstance(raw, dict):
        raise ScenarioError(["yaml: top level must be a mapping"])
    return scenario_from_dict(raw)


def load_scenario_file(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return load_scenario(fh.read())


def apply_override(raw: dict, dotted_key: str, value) -> dict:
    """Set a dotted-path key (lists addressed by index) in a config dict."""
    parts = dotted_key.split(".")
    node = raw
    for part in parts[:-1]:
        if isinstance(node, list):
            node = node[int(part)]
        else:
            node = node.setdefault(part, {})
    last = parts[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value
    return raw
