"""Gateway cluster behaviour: onboarding, replication, rotation, faults."""

from __future__ import annotations

from random import Random

from appendchain import codec
from appendchain.chain import Reject, verify_chain
from appendchain.consensus import Algorithm, ConsensusConfig, Phase
from appendchain.crypto import generate_keypair, sign
from appendchain.devices import SimDevice
from appendchain.gateway import (
    ByzantineStrategy,
    GatewayNode,
    StatusCode,
    parse_status,
)
from appendchain.chain import DeviceInfo, decode_info
from appendchain.codec import Reader
from appendchain.metrics import MetricsSink
from appendchain.network import MS, InMemoryNetwork, NetConfig, Latency


HOUR_MS = 3_600_000


class FakeDevice:
    """Endpoint that records frames verbatim so tests can inspect replies."""

    def __init__(self, node_id: str) -> None:
        self.node_id = node_id
        self.frames: list[bytes] = []

    def on_message(self, sender, frame, clock) -> None:
        self.frames.append(frame)

    def on_timer(self, tag, clock) -> None:
        pass

    def statuses(self) -> list[StatusCode]:
        return [
            parse_status(f)[0]
            for f in self.frames
            if f and f[0] == codec.MSG_STATUS
        ]


def make_cluster(
    count: int,
    algorithm: Algorithm = Algorithm.WITNESS,
    *,
    witness_minimum: int = 2,
    seed: int = 7,
    net_cfg: NetConfig | None = None,
    ttl_ms: int = HOUR_MS,
    timeout_ms: int = 500,
    byzantine: dict[str, ByzantineStrategy] | None = None,
):
    rng = Random(seed)
    if net_cfg is None:
        net_cfg = NetConfig(seed=rng.getrandbits(64))
    net = InMemoryNetwork(net_cfg)
    ids = [f"gw-{i}" for i in range(count)]
    pairs = {gid: generate_keypair(rng) for gid in ids}
    cfg = ConsensusConfig(
        algorithm=algorithm,
        gateways=tuple(pairs[gid].public for gid in ids),
        witness_minimum=witness_minimum if count > 1 else 0,
        leader_index=0,
        timeout_ms=timeout_ms,
    )
    sink = MetricsSink()
    nodes: dict[str, GatewayNode] = {}
    for gid in ids:
        node = GatewayNode(
            gid,
            pairs[gid],
            cfg,
            net,
            sink,
            peers={o: pairs[o].public for o in ids if o != gid},
            device_ttl_ms=ttl_ms,
            byzantine=(byzantine or {}).get(gid),
            rng=Random(rng.getrandbits(64)),
        )
        nodes[gid] = node
        net.register(node, kind="gateway")
    for i, gid in enumerate(ids):
        net.set_timer(gid, i * 2 * MS, ("bootstrap",))
    return net, nodes, sink, rng


def add_device(net, rng: Random, home: str, start_ms: int = 30, **kwargs) -> SimDevice:
    device = SimDevice(
        f"dev-{home}-{rng.randrange(1 << 20)}",
        home,
        net,
        Random(rng.getrandbits(64)),
        **kwargs,
    )
    net.register(device, kind="device")
    net.set_timer(device.node_id, start_ms * MS, ("start",))
    return device


def digests(nodes) -> set[bytes]:
    return {node.chain.chain_digest() for node in nodes.values()}


def test_bootstrap_gives_every_gateway_an_identity_block() -> None:
    net, nodes, _, _ = make_cluster(4)
    net.run_until_quiescent()
    assert len(digests(nodes)) == 1
    for node in nodes.values():
        assert len(node.chain) == 4
        for other in nodes.values():
            assert node.chain.lookup(other.pair.public) is not None


def test_onboarded_device_owns_one_block_on_every_replica() -> None:
    net, nodes, sink, rng = make_cluster(4)
    device = add_device(net, rng, "gw-2", tx_target=0)
    net.run_until_quiescent()
    assert device.onboarded
    indexes = {
        gid: node.chain.lookup(device.pair.public) for gid, node in nodes.items()
    }
    assert None not in indexes.values()
    assert len(set(indexes.values())) == 1
    assert all(len(node.chain) == 5 for node in nodes.values())
    assert len(digests(nodes)) == 1


def test_reconnect_with_known_key_adds_no_block() -> None:
    net, nodes, sink, rng = make_cluster(4)
    device = add_device(net, rng, "gw-1", tx_target=0)
    net.run_until_quiescent()
    before = {gid: len(node.chain) for gid, node in nodes.items()}
    net.send(
        device.node_id,
        "gw-1",
        bytes([codec.MSG_CONNECT]) + codec.pack_bytes(device.pair.public),
    )
    net.run_until_quiescent()
    assert {gid: len(node.chain) for gid, node in nodes.items()} == before


def test_device_entries_replicate_to_every_gateway() -> None:
    net, nodes, sink, rng = make_cluster(4)
    devices = [
        add_device(net, rng, gid, tx_target=5, interval_us=5 * MS)
        for gid in ("gw-0", "gw-3")
    ]
    net.run_until_quiescent()
    keys = tuple(node.pair.public for node in nodes.values())
    for node in nodes.values():
        for device in devices:
            index = node.chain.lookup(device.pair.public)
            assert index is not None
            assert len(node.chain.block(index).ledger) == 5
        assert verify_chain(node.chain, gateway_keys=frozenset(keys)) is None
    assert len(digests(nodes)) == 1
    assert all(device.remaining == 0 for device in devices)


def test_data_under_unknown_key_is_refused_without_side_effects() -> None:
    net, nodes, sink, rng = make_cluster(4)
    probe = FakeDevice("dev-ghost")
    net.register(probe, kind="device")
    net.run_until_quiescent()
    before = digests(nodes)
    stranger = generate_keypair(rng)
    info = DeviceInfo(
        device_sig=b"",
        access_level=0,
        gps=None,
        data=b"uninvited",
        produced_at=1_700_000_000_000,
    )
    info = DeviceInfo(
        device_sig=sign(stranger.secret, info.signed_payload()),
        access_level=info.access_level,
        gps=info.gps,
        data=info.data,
        produced_at=info.produced_at,
    )
    net.send(probe.node_id, "gw-0", bytes([codec.MSG_DATA]) + info.encode())
    net.run_until_quiescent()
    assert StatusCode.UNKNOWN_KEY in probe.statuses()
    assert digests(nodes) == before


def test_expiry_rotates_key_and_opens_a_second_block() -> None:
    net, nodes, sink, rng = make_cluster(1, ttl_ms=200)
    device = add_device(
        net, rng, "gw-0", tx_target=12, interval_us=40 * MS, start_ms=10
    )
    net.run_until_quiescent()
    node = nodes["gw-0"]
    assert device.rotations_completed >= 1
    assert device.key_history, "device should retain its superseded keys"
    assert device.remaining == 0
    old_index = node.chain.lookup(device.key_history[0].public)
    new_index = node.chain.lookup(device.pair.public)
    assert old_index is not None and new_index is not None and new_index > old_index
    old_block = node.chain.block(old_index)
    # the superseded ledger is frozen: everything in it predates the cutoff
    assert old_block.ledger
    assert all(
        tx.info.produced_at < old_block.header.expires_at
        for tx in old_block.ledger
    )
    assert verify_chain(node.chain) is None
    produced = sum(
        len(node.chain.block(i).ledger)
        for i in (
            node.chain.lookup(pair.public)
            for pair in [*device.key_history, device.pair]
        )
        if i is not None
    )
    assert produced == 12


def test_query_spans_all_blocks_of_a_rotated_device() -> None:
    net, nodes, sink, rng = make_cluster(1, ttl_ms=200)
    device = add_device(
        net, rng, "gw-0", tx_target=12, interval_us=40 * MS, start_ms=10
    )
    net.run_until_quiescent()
    assert device.rotations_completed >= 1
    probe = FakeDevice("dev-asker")
    net.register(probe, kind="device")
    query = (
        bytes([codec.MSG_QUERY])
        + codec.pack_bytes(device.pair.public)
        + codec.pack_u64(10)
    )
    net.send(probe.node_id, "gw-0", query)
    net.run_until_quiescent()
    result = [f for f in probe.frames if f[0] == codec.MSG_QUERY_RESULT]
    assert len(result) == 1
    reader = Reader(result[0], pos=1)
    count = reader.read_u32()
    entries = [decode_info(reader) for _ in range(count)]
    reader.expect_end()
    assert count == 12
    # chronological: block order, then intra-ledger order
    stamps = [info.produced_at for info in entries]
    assert stamps == sorted(stamps)


def test_query_filters_entries_above_the_callers_level() -> None:
    net, nodes, sink, rng = make_cluster(1)
    probe = FakeDevice("dev-mixed")
    net.register(probe, kind="device")
    pair = generate_keypair(rng)
    net.run_until_quiescent()
    net.send(
        probe.node_id, "gw-0", bytes([codec.MSG_CONNECT]) + codec.pack_bytes(pair.public)
    )
    net.run_until_quiescent()
    assert StatusCode.ONBOARDED in probe.statuses()
    for level in (0, 1, 2, 3):
        payload = DeviceInfo(
            device_sig=b"",
            access_level=level,
            gps=None,
            data=bytes([level]) * 8,
            produced_at=1_700_000_000_000 + level,
        )
        signed = DeviceInfo(
            device_sig=sign(pair.secret, payload.signed_payload()),
            access_level=payload.access_level,
            gps=payload.gps,
            data=payload.data,
            produced_at=payload.produced_at,
        )
        net.send(probe.node_id, "gw-0", bytes([codec.MSG_DATA]) + signed.encode())
    net.run_until_quiescent()
    net.send(
        probe.node_id,
        "gw-0",
        bytes([codec.MSG_QUERY]) + codec.pack_bytes(pair.public) + codec.pack_u64(1),
    )
    net.run_until_quiescent()
    result = [f for f in probe.frames if f[0] == codec.MSG_QUERY_RESULT][-1]
    reader = Reader(result, pos=1)
    count = reader.read_u32()
    entries = [decode_info(reader) for _ in range(count)]
    assert count == 2
    assert {info.access_level for info in entries} == {0, 1}


def test_rejected_new_key_is_counted_then_a_clean_rotation_follows() -> None:
    net, nodes, sink, rng = make_cluster(1, ttl_ms=200)
    device = add_device(
        net,
        rng,
        "gw-0",
        tx_target=12,
        interval_us=40 * MS,
        start_ms=10,
        misbehave_rotations=1,
    )
    net.run_until_quiescent()
    node = nodes["gw-0"]
    assert sink.counters.get(("gw-0", "reject_InvalidNewKey"), 0) >= 1
    assert device.rejections.get(StatusCode.INVALID_NEW_KEY, 0) >= 1
    assert device.rotations_completed >= 1
    assert device.remaining == 0
    assert verify_chain(node.chain) is None


def test_silent_rotation_times_out_then_recovers() -> None:
    net, nodes, sink, rng = make_cluster(1, ttl_ms=200, timeout_ms=100)
    device = add_device(
        net,
        rng,
        "gw-0",
        tx_target=12,
        interval_us=40 * MS,
        start_ms=10,
        silent_rotations=1,
    )
    net.run_until_quiescent()
    node = nodes["gw-0"]
    assert device.rejections.get(StatusCode.KEY_UPDATE_TIMEOUT, 0) >= 1
    assert device.rotations_completed >= 1
    assert device.remaining == 0
    assert verify_chain(node.chain) is None


def test_mute_leader_is_routed_around_by_round_rotation() -> None:
    net, nodes, sink, rng = make_cluster(
        4, byzantine={"gw-0": ByzantineStrategy.MUTE_LEADER}
    )
    device = add_device(net, rng, "gw-2", tx_target=3, interval_us=5 * MS)
    net.run_until_quiescent()
    assert device.onboarded
    honest = {gid: n for gid, n in nodes.items() if gid != "gw-0"}
    for node in honest.values():
        assert node.chain.lookup(device.pair.public) is not None
    assert len(digests(honest)) == 1
    assert sink.counters.get(("gw-0", "byz_muted_proposals"), 0) >= 1
    assert sink.counter_total("connect_retry") >= 1


def test_pbft_commits_while_one_of_four_is_isolated() -> None:
    cfg = NetConfig(
        seed=5,
        partitions=(frozenset({"gw-0", "gw-1", "gw-2"}), frozenset({"gw-3"})),
    )
    net, nodes, sink, rng = make_cluster(4, Algorithm.PBFT, net_cfg=cfg, timeout_ms=200)
    device = add_device(net, rng, "gw-1", tx_target=4, interval_us=5 * MS)
    net.run_until(120_000 * MS)
    assert device.onboarded and device.remaining == 0
    reachable = {gid: nodes[gid] for gid in ("gw-0", "gw-1", "gw-2")}
    for node in reachable.values():
        index = node.chain.lookup(device.pair.public)
        assert index is not None
        assert len(node.chain.block(index).ledger) == 4
    assert len(digests(reachable)) == 1
    assert len(nodes["gw-3"].chain) == 0


def test_witness_commits_inside_a_three_gateway_island() -> None:
    island = frozenset({"gw-0", "gw-1", "gw-2"})
    rest = frozenset(f"gw-{i}" for i in range(3, 10))
    cfg = NetConfig(seed=6, partitions=(island, rest))
    net, nodes, sink, rng = make_cluster(
        10, Algorithm.WITNESS, net_cfg=cfg, timeout_ms=200
    )
    device = add_device(net, rng, "gw-1", tx_target=2, interval_us=5 * MS)
    net.run_until(120_000 * MS)
    assert device.onboarded and device.remaining == 0
    for gid in island:
        assert nodes[gid].chain.lookup(device.pair.public) is not None
    assert len(digests({gid: nodes[gid] for gid in island})) == 1
    for gid in rest:
        assert nodes[gid].chain.lookup(device.pair.public) is None


def test_replayed_peer_entry_is_dropped_as_duplicate() -> None:
    net, nodes, sink, rng = make_cluster(4)
    device = add_device(net, rng, "gw-0", tx_target=3, interval_us=5 * MS)
    net.run_until_quiescent()
    victim = nodes["gw-1"]
    index = victim.chain.lookup(device.pair.public)
    block = victim.chain.block(index)
    replay = (
        bytes([codec.MSG_PEER_TRANSACTION])
        + block.ledger[0].encode()
        + block.header.digest
    )
    before = sink.counters.get(("gw-1", "reject_Duplicate"), 0)
    ledger_len = len(block.ledger)
    net.send("gw-0", "gw-1", replay)
    net.run_until_quiescent()
    assert sink.counters.get(("gw-1", "reject_Duplicate"), 0) == before + 1
    assert len(victim.chain.block(index).ledger) == ledger_len


def test_equivocating_pbft_leader_cannot_split_honest_replicas() -> None:
    net, nodes, sink, rng = make_cluster(
        4,
        Algorithm.PBFT,
        byzantine={"gw-0": ByzantineStrategy.EQUIVOCATE},
        timeout_ms=200,
    )
    devices = [
        add_device(net, rng, gid, tx_target=2, interval_us=5 * MS)
        for gid in ("gw-1", "gw-2", "gw-3")
    ]
    net.run_until(300_000 * MS)
    honest = {gid: n for gid, n in nodes.items() if gid != "gw-0"}
    assert len(digests(honest)) == 1
    for device in devices:
        assert device.onboarded
    sample = next(iter(honest.values()))
    assert len(sample.chain) >= 7  # 4 identities + 3 devices
    quorum = 3  # 2f + 1 with n = 4
    assert len(sample.decisions) == len(sample.chain)
    for decision in sample.decisions.values():
        voters = {
            v.voter
            for v in decision.votes
            if v.phase is Phase.COMMIT and v.voter in sample.cfg.gateways
        }
        assert len(voters) >= quorum


def test_latency_jitter_and_reordering_do_not_break_agreement() -> None:
    cfg = NetConfig(
        seed=12,
        latency=Latency.uniform_ms(1, 20),
        reorder_window=4,
    )
    net, nodes, sink, rng = make_cluster(4, net_cfg=cfg)
    devices = [
        add_device(net, rng, gid, tx_target=6, interval_us=3 * MS)
        for gid in nodes
    ]
    net.run_until_quiescent()
    assert len(digests(nodes)) == 1
    keys = tuple(node.pair.public for node in nodes.values())
    for node in nodes.values():
        assert verify_chain(node.chain, gateway_keys=frozenset(keys)) is None
    for device in devices:
        assert device.remaining == 0
