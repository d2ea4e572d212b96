"""Scenario orchestration and reporting.

A scenario boots a gateway network, onboards a device fleet, streams signed
readings until every device has delivered its quota, then checks integrity
(replica equality plus full chain re-validation) and reduces the collected
latency samples to medians.

Traffic shaping: each run has a virtual duration derived from its size.
Devices connect staggered over the first 40% of it and then emit at a fixed
interval sized so their quota spans 55% of it.  Because the duration scales
with fleet size but **not** with the per-device quota (up to a cap), raising
transactions-per-device raises the arrival rate — and with it the queueing
delay every consensus round experiences underneath.  That is the mechanism
behind the load-vs-latency trends in the reports.
"""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from random import Random
from typing import Optional, TextIO

from .chain import Blockchain, Violation, verify_chain
from .consensus import Algorithm, ConsensusConfig, ConsensusDecision
from .crypto import generate_keypair
from .devices import DeviceHub, SimDevice
from .gateway import DEFAULT_DEVICE_TTL_MS, GatewayNode, ServiceTimes
from .journal import JournalWriter
from .metrics import (
    ADD_BLOCK_LEADER,
    APPEND_TX,
    BLOCK_CONSENSUS,
    UPDATE_BLOCK,
    UPDATE_TX,
    MetricsSink,
)
from .network import MS, InMemoryNetwork, NetConfig, SocketNetwork

logger = logging.getLogger(__name__)

#: label -> (gateways, devices per gateway, transactions per device)
SCENARIO_GRID: dict[str, tuple[int, int, int]] = {
    "A": (10, 10, 100),
    "B": (10, 10, 500),
    "C": (10, 10, 1000),
    "D": (10, 50, 100),
    "E": (10, 50, 500),
    "F": (10, 50, 1000),
    "G": (10, 100, 100),
    "H": (10, 100, 500),
    "I": (10, 100, 1000),
}

CONNECT_FRACTION = 0.70  # share of the run during which devices connect
EMIT_FRACTION = 0.25  # share of the run one device's emissions span
# With emissions much shorter than the connect window, the aggregate
# arrival rate plateaus early and most onboardings run against it, so
# consensus latency reflects the configured traffic level.
BOOTSTRAP_GRACE_MS = 1000  # identity consensus happens before devices start

CSV_COLUMNS = (
    "label",
    "consensus",
    "gateways",
    "devices_per_gw",
    "tx_per_device",
    "total_blocks",
    "total_tx",
    "block_consensus_ms",
    "add_block_leader_ms",
    "update_block_ms",
    "append_tx_ms",
    "update_tx_ms",
)


class ScenarioError(Exception):
    """End-of-run integrity check failed; message carries the diagnostics."""


@dataclass(frozen=True)
class ScenarioConfig:
    """One benchmark run: topology, workload, consensus and fault model."""

    label: str
    algorithm: Algorithm
    gateways: int
    devices_per_gateway: int
    tx_per_device: int
    witness_minimum: int = 2
    seed: int = 0
    ttl_ms: int = DEFAULT_DEVICE_TTL_MS
    timeout_ms: int = 500
    duration_ms: Optional[int] = None
    payload_size: int = 64
    net: Optional[NetConfig] = None
    service: ServiceTimes = ServiceTimes()

    def __post_init__(self) -> None:
        if self.gateways < 1:
            raise ValueError("gateways must be >= 1")
        if self.devices_per_gateway < 1:
            raise ValueError("devices_per_gateway must be >= 1")
        if self.tx_per_device < 0:
            raise ValueError("tx_per_device must be >= 0")
        if self.ttl_ms <= 0:
            raise ValueError("ttl_ms must be positive")

    @classmethod
    def preset(
        cls, label: str, algorithm: Algorithm, **overrides: object
    ) -> "ScenarioConfig":
        """One of the named grid scenarios (labels A through I)."""
        try:
            gateways, devices, txs = SCENARIO_GRID[label.upper()]
        except KeyError:
            raise ValueError(
                f"unknown scenario {label!r}; expected one of "
                f"{', '.join(SCENARIO_GRID)}"
            ) from None
        return cls(
            label=label.upper(),
            algorithm=algorithm,
            gateways=gateways,
            devices_per_gateway=devices,
            tx_per_device=txs,
            **overrides,  # type: ignore[arg-type]
        )

    @property
    def effective_witness_minimum(self) -> int:
        if self.gateways == 1:
            return 0
        return min(self.witness_minimum, self.gateways - 1)

    @property
    def effective_duration_ms(self) -> int:
        """Virtual run length; explicit value wins, else scaled to size.

        Sized so the busiest gateway stays below saturation.  A gateway's
        work per emitted reading is its own handling cost plus one peer
        replication per other gateway, so the window grows linearly with
        devices and with that replication factor.  Up to 500 transactions
        per device the window does not grow with the quota at all —
        a bigger quota means a proportionally higher arrival rate, which
        is what makes the consensus latencies load-sensitive.  Past 500
        the window stretches again (divisor > 500) so utilization keeps
        climbing gently instead of tipping the queues over.
        """
        if self.duration_ms is not None:
            return self.duration_ms
        replication = 1.0 + (self.gateways - 1) * (
            self.service.peer_tx_us / self.service.device_data_us
        )
        stretch = max(1.0, self.tx_per_device / 650.0)
        return max(
            6000,
            int(1150 * self.devices_per_gateway * replication * stretch),
        )

    @property
    def total_devices(self) -> int:
        return self.gateways * self.devices_per_gateway

    @property
    def expected_tx(self) -> int:
        return self.total_devices * self.tx_per_device


@dataclass
class MetricsReport:
    """Reduced per-run results: totals plus the five latency medians (ms)."""

    label: str
    consensus: str
    gateways: int
    devices_per_gw: int
    tx_per_device: int
    total_blocks: int
    total_tx: int
    device_blocks: int
    rotation_blocks: int
    block_consensus_ms: Optional[float]
    add_block_leader_ms: Optional[float]
    update_block_ms: Optional[float]
    append_tx_ms: Optional[float]
    update_tx_ms: Optional[float]
    per_gateway: dict[str, dict[str, Optional[float]]] = field(default_factory=dict)
    counters: dict[str, int] = field(default_factory=dict)

    def csv_cells(self) -> list[str]:
        return [
            self.label,
            self.consensus,
            str(self.gateways),
            str(self.devices_per_gw),
            str(self.tx_per_device),
            str(self.total_blocks),
            str(self.total_tx),
            _fmt(self.block_consensus_ms),
            _fmt(self.add_block_leader_ms),
            _fmt(self.update_block_ms),
            _fmt(self.append_tx_ms),
            _fmt(self.update_tx_ms),
        ]

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "consensus": self.consensus,
            "gateways": self.gateways,
            "devices_per_gw": self.devices_per_gw,
            "tx_per_device": self.tx_per_device,
            "total_blocks": self.total_blocks,
            "total_tx": self.total_tx,
            "device_blocks": self.device_blocks,
            "rotation_blocks": self.rotation_blocks,
            "block_consensus_ms": self.block_consensus_ms,
            "add_block_leader_ms": self.add_block_leader_ms,
            "update_block_ms": self.update_block_ms,
            "append_tx_ms": self.append_tx_ms,
            "update_tx_ms": self.update_tx_ms,
            "per_gateway": self.per_gateway,
            "counters": self.counters,
        }


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.3f}"


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    report: MetricsReport
    chains: dict[str, Blockchain]  # every gateway, byzantine included
    honest: tuple[str, ...]
    devices: list[SimDevice]
    sink: MetricsSink
    elapsed_virtual_us: int
    elapsed_wall_s: float
    replica_digest: bytes  # shared digest of the honest replicas
    consensus: ConsensusConfig
    #: per gateway: block index -> the decision that admitted it, so the
    #: quorum evidence behind every block can be audited after the run
    decisions: dict[str, dict[int, ConsensusDecision]]

    @property
    def honest_chain(self) -> Blockchain:
        return self.chains[self.honest[0]]


def _gateway_ids(count: int) -> list[str]:
    return [f"gw{i}" for i in range(count)]


def _resolve_check(cfg: ScenarioConfig, net_cfg: NetConfig, check: str) -> str:
    if check != "auto":
        return check
    if net_cfg.drop_rate > 0 or net_cfg.partitions:
        return "none"
    if net_cfg.byzantine:
        return "honest"
    return "full"


def run_scenario(
    cfg: ScenarioConfig,
    *,
    journal_dir: Optional[str] = None,
    transport: str = "inmem",
    check: str = "auto",
) -> ScenarioResult:
    """Execute one scenario end to end and return report plus raw state.

    ``check`` is ``auto`` (strictness inferred from the fault model),
    ``full`` (all replicas equal and totals exact), ``honest`` (equality and
    validity among non-byzantine gateways only) or ``none`` (validity only).
    Integrity failures raise :class:`ScenarioError`.
    """
    if transport not in ("inmem", "socket"):
        raise ValueError(f"unknown transport {transport!r}")
    master = Random(cfg.seed)
    net_cfg = cfg.net if cfg.net is not None else NetConfig(seed=master.getrandbits(64))
    mode = _resolve_check(cfg, net_cfg, check)

    gw_ids = _gateway_ids(cfg.gateways)
    gw_pairs = {gid: generate_keypair(master) for gid in gw_ids}
    consensus_cfg = ConsensusConfig(
        algorithm=cfg.algorithm,
        gateways=tuple(gw_pairs[gid].public for gid in gw_ids),
        witness_minimum=cfg.effective_witness_minimum,
        leader_index=0,
        timeout_ms=cfg.timeout_ms,
    )

    wall_start = time.monotonic()
    if transport == "socket":
        net = SocketNetwork(net_cfg)
    else:
        net = InMemoryNetwork(net_cfg)

    sink = MetricsSink()
    journals: list[JournalWriter] = []
    gateways: dict[str, GatewayNode] = {}
    try:
        for gid in gw_ids:
            journal = None
            if journal_dir is not None:
                journal = JournalWriter(f"{journal_dir}/{gid}.journal", append=False)
                journals.append(journal)
            node = GatewayNode(
                gid,
                gw_pairs[gid],
                consensus_cfg,
                net,
                sink,
                peers={
                    other: gw_pairs[other].public
                    for other in gw_ids
                    if other != gid
                },
                service=cfg.service,
                device_ttl_ms=cfg.ttl_ms,
                byzantine=net_cfg.strategy_of(gid),
                journal=journal,
                rng=Random(master.getrandbits(64)),
            )
            gateways[gid] = node
            net.register(node, kind="gateway")

        hub: Optional[DeviceHub] = None
        if transport == "socket":
            hub = DeviceHub("device-hub")
            net.register(hub, kind="device")

        devices: list[SimDevice] = []
        duration_us = cfg.effective_duration_ms * MS
        emit_window_us = int(duration_us * EMIT_FRACTION)
        interval_us = max(
            1000, emit_window_us // max(1, cfg.tx_per_device)
        )
        for gid in gw_ids:
            for j in range(cfg.devices_per_gateway):
                device = SimDevice(
                    f"dev-{gid}-{j}",
                    gid,
                    net,
                    Random(master.getrandbits(64)),
                    tx_target=cfg.tx_per_device,
                    interval_us=interval_us,
                    payload_size=cfg.payload_size,
                )
                devices.append(device)
                if hub is not None:
                    hub.add(device)
                    net.register_alias(device.node_id, hub.node_id)
                else:
                    net.register(device, kind="device")

        # identity bootstrap first, then the staggered device fleet
        for i, gid in enumerate(gw_ids):
            net.set_timer(gid, i * 2 * MS, ("bootstrap",))
        connect_window_us = int(duration_us * CONNECT_FRACTION)
        order = list(range(len(devices)))
        master.shuffle(order)
        for slot, device_index in enumerate(order):
            start_us = (
                BOOTSTRAP_GRACE_MS * MS
                + slot * connect_window_us // max(1, len(devices))
                + master.randint(0, 2 * MS)
            )
            net.set_timer(devices[device_index].node_id, start_us, ("start",))

        limit_us = duration_us * 3 + 120_000_000
        elapsed_virtual = net.run_until_quiescent(limit_us)
    finally:
        for journal in journals:
            journal.close()
        if transport == "socket":
            net.close()
    elapsed_wall = time.monotonic() - wall_start

    byz_ids = {name for name, _ in net_cfg.byzantine}
    honest = tuple(gid for gid in gw_ids if gid not in byz_ids)
    chains = {gid: gateways[gid].chain for gid in gw_ids}
    report = _check_and_reduce(
        cfg, consensus_cfg, chains, honest, devices, sink, mode
    )
    return ScenarioResult(
        config=cfg,
        report=report,
        chains=chains,
        honest=honest,
        devices=devices,
        sink=sink,
        elapsed_virtual_us=elapsed_virtual,
        elapsed_wall_s=elapsed_wall,
        replica_digest=chains[honest[0]].chain_digest(),
        consensus=consensus_cfg,
        decisions={gid: dict(gateways[gid].decisions) for gid in gw_ids},
    )


def _check_and_reduce(
    cfg: ScenarioConfig,
    consensus_cfg: ConsensusConfig,
    chains: dict[str, Blockchain],
    honest: tuple[str, ...],
    devices: list[SimDevice],
    sink: MetricsSink,
    mode: str,
) -> MetricsReport:
    problems: list[str] = []
    membership = frozenset(consensus_cfg.gateways)

    for gid in honest:
        violation = verify_chain(chains[gid], membership)
        if violation is not None:
            problems.append(f"{gid}: chain invalid: {_describe(violation)}")

    if mode in ("full", "honest") and len(honest) > 1:
        digests = {gid: chains[gid].chain_digest() for gid in honest}
        if len(set(digests.values())) != 1:
            for gid in honest:
                chain = chains[gid]
                problems.append(
                    f"{gid}: blocks={len(chain)} "
                    f"tx={sum(len(b.ledger) for b in chain.blocks)} "
                    f"digest={digests[gid].hex()[:16]}"
                )
            problems.insert(0, "replica divergence among honest gateways")

    chain = chains[honest[0]]
    total_blocks = len(chain)
    total_tx = sum(len(block.ledger) for block in chain.blocks)
    first_keys = set()
    for device in devices:
        first = device.key_history[0] if device.key_history else device.pair
        first_keys.add(first.public)
    device_blocks = sum(
        1 for block in chain.blocks if block.header.owner_key in first_keys
    )
    gateway_blocks = sum(
        1 for block in chain.blocks if block.header.owner_key in membership
    )
    rotation_blocks = total_blocks - device_blocks - gateway_blocks

    if mode == "full":
        stuck = [d.node_id for d in devices if not d.onboarded or d.refused]
        if stuck:
            problems.append(f"devices never onboarded: {stuck[:5]} ...")
        undelivered = sum(d.remaining for d in devices)
        if undelivered:
            problems.append(f"{undelivered} readings never delivered")
        if device_blocks != cfg.total_devices:
            problems.append(
                f"expected {cfg.total_devices} device blocks, "
                f"found {device_blocks}"
            )
        if gateway_blocks != cfg.gateways:
            problems.append(
                f"expected {cfg.gateways} gateway identity blocks, "
                f"found {gateway_blocks}"
            )
        if total_tx != cfg.expected_tx:
            problems.append(
                f"expected {cfg.expected_tx} transactions, found {total_tx}"
            )

    if problems:
        raise ScenarioError(
            f"scenario {cfg.label} ({cfg.algorithm}) FAILED:\n  "
            + "\n  ".join(problems)
        )

    def merged_median(metric: str) -> Optional[float]:
        values: list[int] = []
        for gid in honest:
            values.extend(sink.samples(metric, gid))
        if not values:
            return None
        return statistics.median(values) / 1000.0

    per_gateway: dict[str, dict[str, Optional[float]]] = {}
    for gid in sorted(chains):
        per_gateway[gid] = {
            metric: sink.median_ms(metric, gid)
            for metric in (
                BLOCK_CONSENSUS,
                ADD_BLOCK_LEADER,
                UPDATE_BLOCK,
                APPEND_TX,
                UPDATE_TX,
            )
        }
    counters: dict[str, int] = {}
    for (_, name), value in sink.counters.items():
        counters[name] = counters.get(name, 0) + value

    return MetricsReport(
        label=cfg.label,
        consensus=str(cfg.algorithm),
        gateways=cfg.gateways,
        devices_per_gw=cfg.devices_per_gateway,
        tx_per_device=cfg.tx_per_device,
        total_blocks=total_blocks,
        total_tx=total_tx,
        device_blocks=device_blocks,
        rotation_blocks=rotation_blocks,
        block_consensus_ms=merged_median(BLOCK_CONSENSUS),
        add_block_leader_ms=merged_median(ADD_BLOCK_LEADER),
        update_block_ms=merged_median(UPDATE_BLOCK),
        append_tx_ms=merged_median(APPEND_TX),
        update_tx_ms=merged_median(UPDATE_TX),
        per_gateway=per_gateway,
        counters=dict(sorted(counters.items())),
    )


def _describe(violation: Violation) -> str:
    return (
        f"block {violation.block_index}, entry {violation.tx_index}: "
        f"{violation.reason}"
    )


# ----------------------------------------------------------------------
# comparison runs

RATIO_METRICS = (
    "block_consensus_ms",
    "add_block_leader_ms",
    "update_block_ms",
    "append_tx_ms",
    "update_tx_ms",
)


@dataclass
class ComparisonResult:
    witness: ScenarioResult
    pbft: ScenarioResult
    ratios: dict[str, Optional[float]]


def compare_consensus(
    cfg: ScenarioConfig, **run_kwargs: object
) -> ComparisonResult:
    """Run the identical workload under both algorithms and pair the medians.

    Ratios are pbft/witness per metric (``None`` when either side lacks
    samples).
    """
    results = {}
    for algorithm in (Algorithm.WITNESS, Algorithm.PBFT):
        variant = ScenarioConfig(
            label=cfg.label,
            algorithm=algorithm,
            gateways=cfg.gateways,
            devices_per_gateway=cfg.devices_per_gateway,
            tx_per_device=cfg.tx_per_device,
            witness_minimum=cfg.witness_minimum,
            seed=cfg.seed,
            ttl_ms=cfg.ttl_ms,
            timeout_ms=cfg.timeout_ms,
            duration_ms=cfg.duration_ms,
            payload_size=cfg.payload_size,
            net=cfg.net,
            service=cfg.service,
        )
        results[algorithm] = run_scenario(variant, **run_kwargs)  # type: ignore[arg-type]
    witness, pbft = results[Algorithm.WITNESS], results[Algorithm.PBFT]
    ratios: dict[str, Optional[float]] = {}
    for metric in RATIO_METRICS:
        w = getattr(witness.report, metric)
        p = getattr(pbft.report, metric)
        ratios[metric] = (p / w) if (w and p is not None) else None
    return ComparisonResult(witness=witness, pbft=pbft, ratios=ratios)


# ----------------------------------------------------------------------
# report emission

def emit_report(
    reports: list[MetricsReport], fmt: str, out: TextIO
) -> None:
    """Write reports as ``csv``, ``json`` or a human ``table``."""
    if fmt == "csv":
        out.write(",".join(CSV_COLUMNS) + "\n")
        for report in reports:
            out.write(",".join(report.csv_cells()) + "\n")
    elif fmt == "json":
        payload = [report.as_dict() for report in reports]
        json.dump(payload, out, indent=2, sort_keys=True)
        out.write("\n")
    elif fmt == "table":
        widths = [len(c) for c in CSV_COLUMNS]
        rows = [report.csv_cells() for report in reports]
        for row in rows:
            widths = [max(w, len(cell)) for w, cell in zip(widths, row)]
        line = "  ".join(c.ljust(w) for c, w in zip(CSV_COLUMNS, widths))
        out.write(line.rstrip() + "\n")
        out.write("  ".join("-" * w for w in widths) + "\n")
        for row in rows:
            out.write(
                "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
                + "\n"
            )
    else:
        raise ValueError(f"unknown report format {fmt!r}")
