"""Gateway node: home for devices, replica holder, consensus participant.

Each gateway keeps a full chain replica.  Device-facing handlers implement
onboarding (consensus on a new block), data ingestion (validate, append
locally, replicate to peers) and key rotation when a block's lifetime runs
out.  Peer-facing handlers apply replicated transactions and consensus
decisions, buffer out-of-order arrivals, and fall back to state sync when a
replica discovers it is behind.

The node is transport-agnostic: it reacts to ``on_message``/``on_timer``
callbacks and speaks through ``net.send``/``net.set_timer``, so the same
code runs under the deterministic simulator and over sockets.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from random import Random
from typing import Optional

from . import codec, metrics
from .chain import (
    BlockHeader,
    Blockchain,
    DeviceInfo,
    PublicKey,
    Reject,
    Transaction,
    build_transaction,
    decode_header,
    decode_info,
    decode_transaction,
    device_sig_valid,
    intern_decoded,
    intern_transaction,
    register_transaction,
)
from .codec import DecodeError, Reader
from .consensus import (
    Algorithm,
    ConsensusConfig,
    ConsensusDecision,
    Phase,
    Vote,
    build_candidate,
    decode_decision,
    decode_vote,
    elect_leader,
    make_vote,
    validate_candidate,
    verify_decision,
    vote_valid,
)
from .crypto import KeyPair
from .journal import JournalWriter
from .metrics import MetricsSink
from .network import ByzantineStrategy, WorkClock, wall_ms

logger = logging.getLogger(__name__)

MS = 1000

DEFAULT_DEVICE_TTL_MS = 3_600_000
PEER_BUFFER_LIMIT = 256
ROUND_ADVANCE_ATTEMPTS = 2


class StatusCode(IntEnum):
    """Status byte sent back to devices (and query clients)."""

    ONBOARDED = 0
    ALREADY_KNOWN = 1
    ACCEPTED = 2
    KEY_UPDATED = 3
    REFUSED = 4
    UNKNOWN_KEY = 16
    BAD_DEVICE_SIG = 17
    EXPIRED_BLOCK = 18
    DUPLICATE = 19
    INVALID_NEW_KEY = 20
    KEY_UPDATE_TIMEOUT = 21
    UNKNOWN_BLOCK = 22
    ERROR = 31


_REJECT_STATUS = {
    Reject.UNKNOWN_KEY: StatusCode.UNKNOWN_KEY,
    Reject.BAD_DEVICE_SIG: StatusCode.BAD_DEVICE_SIG,
    Reject.EXPIRED_BLOCK: StatusCode.EXPIRED_BLOCK,
    Reject.DUPLICATE: StatusCode.DUPLICATE,
    Reject.INVALID_NEW_KEY: StatusCode.INVALID_NEW_KEY,
    Reject.KEY_UPDATE_TIMEOUT: StatusCode.KEY_UPDATE_TIMEOUT,
    Reject.UNKNOWN_BLOCK: StatusCode.UNKNOWN_BLOCK,
}


def status_frame(code: StatusCode, detail: str = "") -> bytes:
    return bytes([codec.MSG_STATUS, code]) + codec.pack_text(detail)


def parse_status(frame: bytes) -> tuple[StatusCode, str]:
    reader = Reader(frame, pos=1)
    code = reader.read_u8()
    detail = reader.read_text()
    reader.expect_end()
    try:
        return StatusCode(code), detail
    except ValueError:
        raise DecodeError(f"unknown status code {code}") from None


@dataclass(frozen=True)
class ServiceTimes:
    """Simulated processing cost per kind of work, in microseconds.

    These model the gateway CPU under the virtual clock: a busy gateway
    queues subsequent work, so higher traffic inflates observed latencies
    even though the wall clock plays no role.
    """

    candidate_build_us: int = 500
    candidate_validate_us: int = 300
    vote_process_us: int = 50
    block_apply_leader_us: int = 500
    block_apply_follower_us: int = 200
    device_data_us: int = 1000
    peer_tx_us: int = 250
    sync_serve_us: int = 500
    query_us: int = 100
    misc_us: int = 20


@dataclass
class _Track:
    """Per-candidate vote bookkeeping inside a leader instance."""

    candidate: BlockHeader
    digest: bytes
    recipients: list[str]
    validate_votes: dict[PublicKey, Vote] = field(default_factory=dict)
    prepare_voters: set[PublicKey] = field(default_factory=set)
    commit_votes: dict[PublicKey, Vote] = field(default_factory=dict)
    commit_sent: bool = False


@dataclass
class _LeaderInstance:
    owner_key: PublicKey
    tracks: list[_Track]
    created_us: int
    timer_id: int
    retried: bool = False


@dataclass
class _ValidatorState:
    candidate_hash: bytes
    leader_id: str
    prepare_voters: set[PublicKey]
    commit_sent: bool = False


@dataclass
class _PendingConnect:
    origin: Optional[str]  # device id, or None for the gateway itself
    attempts: int
    timer_id: int


@dataclass
class _Rotation:
    old_key: PublicKey
    timer_id: int
    new_key: Optional[PublicKey] = None


@dataclass
class _Session:
    device_id: str
    current_key: PublicKey
    history: list[PublicKey] = field(default_factory=list)


class GatewayNode:
    """One gateway: consensus member, replica holder and device home."""

    def __init__(
        self,
        node_id: str,
        pair: KeyPair,
        cfg: ConsensusConfig,
        net,
        sink: MetricsSink,
        peers: dict[str, PublicKey],
        *,
        service: ServiceTimes = ServiceTimes(),
        policy: str = "default",
        device_ttl_ms: int = DEFAULT_DEVICE_TTL_MS,
        byzantine: Optional[ByzantineStrategy] = None,
        journal: Optional[JournalWriter] = None,
        rng: Optional[Random] = None,
    ):
        self.node_id = node_id
        self.pair = pair
        self.cfg = cfg
        self.net = net
        self.sink = sink
        self.peers = dict(peers)  # node id -> public key, excluding self
        self.key_to_peer = {pk: nid for nid, pk in peers.items()}
        self.gateway_keys = frozenset(cfg.gateways)
        self.service = service
        self.policy = policy
        self.device_ttl_ms = device_ttl_ms
        self.byzantine = byzantine
        self.journal = journal
        self.rng = rng if rng is not None else Random(0)

        self.chain = Blockchain()
        self.decisions: dict[int, ConsensusDecision] = {}
        self.round = 0
        self.identity_committed = False

        self._instance: Optional[_LeaderInstance] = None
        self._proposal_queue: deque[PublicKey] = deque()
        self._queued_keys: set[PublicKey] = set()
        self._vstates: dict[int, _ValidatorState] = {}
        self._vhash: dict[bytes, int] = {}
        self._early_prepares: dict[bytes, dict[PublicKey, Vote]] = {}
        self._held_candidates: dict[bytes, tuple[str, str, BlockHeader]] = {}

        self._sessions: dict[str, _Session] = {}
        self._key_owner: dict[PublicKey, str] = {}
        self._pending_connects: dict[PublicKey, _PendingConnect] = {}
        self._rotations: dict[str, _Rotation] = {}

        self._peer_tx_buffer: dict[str, deque] = {}
        self._echoed: set[bytes] = set()
        self._sync_pending = False

        self.timeout_us = cfg.timeout_ms * MS
        self.vstate_gc_us = int(self.timeout_us * 0.8)
        self.connect_timeout_us = 2 * self.timeout_us + 500 * MS
        self.key_update_timeout_us = 2 * self.timeout_us

        self._handlers = {
            codec.MSG_CONNECT: self._on_connect,
            codec.MSG_DATA: self._on_data,
            codec.MSG_NEW_KEY_RESPONSE: self._on_new_key_response,
            codec.MSG_QUERY: self._on_query,
            codec.MSG_PROPOSE_KEY: self._on_propose_key,
            codec.MSG_WITNESS_REQUEST: self._on_witness_request,
            codec.MSG_WITNESS_VOTE: self._on_witness_vote,
            codec.MSG_PRE_PREPARE: self._on_pre_prepare,
            codec.MSG_PREPARE: self._on_prepare,
            codec.MSG_COMMIT: self._on_commit,
            codec.MSG_PEER_TRANSACTION: self._on_peer_transaction,
            codec.MSG_PEER_BLOCK: self._on_peer_block,
            codec.MSG_SYNC_REQUEST: self._on_sync_request,
            codec.MSG_SYNC_RESPONSE: self._on_sync_response,
        }

    # ------------------------------------------------------------------
    # plumbing

    def _bump(self, name: str, by: int = 1) -> None:
        self.sink.bump(self.node_id, name, by)

    def _reject(self, reason: Reject) -> None:
        self._bump(f"reject_{reason.value}")

    def current_leader_key(self) -> PublicKey:
        return elect_leader(self.cfg, self.round)

    def is_leader(self) -> bool:
        return self.current_leader_key() == self.pair.public

    def _leader_node_id(self) -> Optional[str]:
        key = self.current_leader_key()
        if key == self.pair.public:
            return None
        return self.key_to_peer.get(key)

    def _send_status(self, device_id: str, code: StatusCode, detail: str = "") -> None:
        self.net.send(self.node_id, device_id, status_frame(code, detail))

    def _corrupt(self, frame: bytes) -> bytes:
        pos = self.rng.randrange(len(frame))
        flip = self.rng.randint(1, 255)
        return frame[:pos] + bytes([frame[pos] ^ flip]) + frame[pos + 1:]

    def _send_peer(self, dst: str, frame: bytes) -> None:
        if self.byzantine is ByzantineStrategy.CORRUPT_PAYLOAD and frame:
            frame = self._corrupt(frame)
            self._bump("byz_corrupted_frames")
        self.net.send(self.node_id, dst, frame)

    def _broadcast_peers(self, frame: bytes, *, exclude: Optional[str] = None) -> None:
        for nid in self.peers:
            if nid != exclude:
                self._send_peer(nid, frame)

    def _wall_ms(self, clock: WorkClock) -> int:
        return wall_ms(clock.now_us)

    # ------------------------------------------------------------------
    # entry points

    def on_message(self, sender: str, frame: bytes, clock: WorkClock) -> None:
        if not frame:
            clock.spend(self.service.misc_us)
            self._bump("malformed_frame")
            return
        handler = self._handlers.get(frame[0])
        if handler is None:
            clock.spend(self.service.misc_us)
            self._bump("unknown_frame_type")
            return
        try:
            handler(sender, frame, clock)
        except DecodeError as exc:
            self._bump("malformed_frame")
            logger.debug("%s: malformed frame from %s: %s", self.node_id, sender, exc)

    def on_timer(self, tag: object, clock: WorkClock) -> None:
        if not isinstance(tag, tuple) or not tag:
            return
        kind = tag[0]
        if kind == "bootstrap":
            self.announce_identity(clock)
        elif kind == "instance":
            self._on_instance_timeout(tag[1], clock)
        elif kind == "connect":
            self._on_connect_timeout(tag[1], clock)
        elif kind == "vgc":
            self._gc_vstate(tag[1])
        elif kind == "rotation":
            self._on_rotation_timeout(tag[1], clock)
        elif kind == "sync":
            self._sync_pending = False

    # ------------------------------------------------------------------
    # identity bootstrap

    def announce_identity(self, clock: WorkClock) -> None:
        """Put this gateway's own key on the chain (every participant owns
        a block, gateways included)."""
        clock.spend(self.service.misc_us)
        if self.chain.lookup(self.pair.public) is not None:
            self.identity_committed = True
            return
        self._request_insertion(self.pair.public, None, clock)

    # ------------------------------------------------------------------
    # device-facing handlers

    def _on_connect(self, sender: str, frame: bytes, clock: WorkClock) -> None:
        clock.spend(self.service.misc_us)
        reader = Reader(frame, pos=1)
        key = reader.read_bytes()
        reader.expect_end()
        session = self._sessions.get(sender)
        if session is None:
            self._sessions[sender] = _Session(device_id=sender, current_key=key)
        else:
            session.current_key = key
        self._key_owner[key] = sender
        if self.chain.lookup(key) is not None:
            self._send_status(sender, StatusCode.ALREADY_KNOWN)
            return
        self._request_insertion(key, sender, clock)

    def _on_data(self, sender: str, frame: bytes, clock: WorkClock) -> None:
        clock.spend(self.service.device_data_us)
        reader = Reader(frame, pos=1)
        info = decode_info(reader)
        reader.expect_end()
        session = self._sessions.get(sender)
        if session is None:
            self._reject(Reject.UNKNOWN_KEY)
            self._send_status(sender, StatusCode.UNKNOWN_KEY)
            return
        key = session.current_key
        block_index = self.chain.lookup(key)
        if block_index is None:
            self._reject(Reject.UNKNOWN_KEY)
            self._send_status(sender, StatusCode.UNKNOWN_KEY)
            return
        if not device_sig_valid(info, key):
            self._reject(Reject.BAD_DEVICE_SIG)
            self._send_status(sender, StatusCode.BAD_DEVICE_SIG)
            return
        header = self.chain.block(block_index).header
        if info.produced_at >= header.expires_at:
            self._reject(Reject.EXPIRED_BLOCK)
            self._begin_rotation(sender, clock)
            self._send_status(sender, StatusCode.EXPIRED_BLOCK)
            return
        if not self.identity_committed:
            self._bump("data_before_identity")
            self._send_status(sender, StatusCode.REFUSED)
            return
        tx = build_transaction(self.chain, block_index, info, self.pair)
        encoded = tx.encode()
        digest = register_transaction(tx, encoded=encoded)
        reject = self.chain.append_transaction(
            block_index, tx, gateway_keys=self.gateway_keys, tx_digest=digest
        )
        if reject is not None:
            self._reject(reject)
            self._send_status(
                sender, _REJECT_STATUS.get(reject, StatusCode.ERROR), str(reject)
            )
            return
        self.sink.record(
            self.node_id, metrics.APPEND_TX, clock.now_us - clock.arrive_us
        )
        if self.journal is not None:
            self.journal.write_transaction(tx)
        peer_frame = (
            bytes([codec.MSG_PEER_TRANSACTION]) + encoded + header.digest
        )
        self._broadcast_peers(peer_frame)
        self._drain_peer_buffers(clock)

    def _on_new_key_response(self, sender: str, frame: bytes, clock: WorkClock) -> None:
        clock.spend(self.service.misc_us)
        reader = Reader(frame, pos=1)
        key = reader.read_bytes()
        reader.expect_end()
        rotation = self._rotations.get(sender)
        if rotation is None:
            self._bump("stray_key_response")
            return
        if self.chain.lookup(key) is not None or key == rotation.old_key:
            self._reject(Reject.INVALID_NEW_KEY)
            self.net.cancel_timer(rotation.timer_id)
            del self._rotations[sender]
            self._send_status(sender, StatusCode.INVALID_NEW_KEY)
            return
        rotation.new_key = key
        self._key_owner[key] = sender
        self._request_insertion(key, sender, clock)

    def _on_query(self, sender: str, frame: bytes, clock: WorkClock) -> None:
        clock.spend(self.service.query_us)
        reader = Reader(frame, pos=1)
        key = reader.read_bytes()
        level = reader.read_u64()
        reader.expect_end()
        owner = self._key_owner.get(key)
        if owner is not None and owner in self._sessions:
            session = self._sessions[owner]
            keys = list(session.history) + [session.current_key]
        else:
            keys = [key]
        block_indexes = [
            idx for idx in (self.chain.lookup(k) for k in keys) if idx is not None
        ]
        if not block_indexes:
            self._reject(Reject.UNKNOWN_KEY)
            self._send_status(sender, StatusCode.UNKNOWN_KEY)
            return
        entries: list[DeviceInfo] = []
        for idx in sorted(block_indexes):
            for tx in self.chain.block(idx).ledger:
                if tx.info.access_level <= level:
                    entries.append(tx.info)
        payload = [bytes([codec.MSG_QUERY_RESULT]), codec.pack_u32(len(entries))]
        payload.extend(info.encode() for info in entries)
        self.net.send(self.node_id, sender, b"".join(payload))

    # ------------------------------------------------------------------
    # key insertion pipeline (consensus)

    def _request_insertion(
        self, key: PublicKey, origin: Optional[str], clock: WorkClock
    ) -> None:
        if key in self._pending_connects:
            return
        timer_id = self.net.set_timer(
            self.node_id, self.connect_timeout_us, ("connect", key)
        )
        self._pending_connects[key] = _PendingConnect(
            origin=origin, attempts=1, timer_id=timer_id
        )
        self._forward_or_propose(key, clock)

    def _forward_or_propose(self, key: PublicKey, clock: WorkClock) -> None:
        leader_id = self._leader_node_id()
        if leader_id is None:
            self._enqueue_proposal(key, clock)
        else:
            self._send_peer(
                leader_id, bytes([codec.MSG_PROPOSE_KEY]) + codec.pack_bytes(key)
            )

    def _on_propose_key(self, sender: str, frame: bytes, clock: WorkClock) -> None:
        clock.spend(self.service.misc_us)
        reader = Reader(frame, pos=1)
        key = reader.read_bytes()
        reader.expect_end()
        if self.chain.lookup(key) is not None:
            return
        self._enqueue_proposal(key, clock)

    def _enqueue_proposal(self, key: PublicKey, clock: WorkClock) -> None:
        if key in self._queued_keys:
            return
        if self._instance is not None and any(
            t.candidate.owner_key == key for t in self._instance.tracks
        ):
            return
        self._queued_keys.add(key)
        self._proposal_queue.append(key)
        self._maybe_start_instance(clock)

    def _maybe_start_instance(self, clock: WorkClock) -> None:
        while self._instance is None and self._proposal_queue:
            key = self._proposal_queue.popleft()
            self._queued_keys.discard(key)
            if self.chain.lookup(key) is not None:
                continue
            if self.byzantine is ByzantineStrategy.MUTE_LEADER:
                self._bump("byz_muted_proposals")
                continue
            self._start_instance(key, clock)

    def _start_instance(self, key: PublicKey, clock: WorkClock) -> None:
        clock.spend(self.service.candidate_build_us)
        candidate = build_candidate(
            self.chain, key, self.policy, self.device_ttl_ms, self._wall_ms(clock)
        )
        peer_ids = list(self.peers)
        equivocating = (
            self.byzantine is ByzantineStrategy.EQUIVOCATE and len(peer_ids) >= 2
        )
        tracks = [_Track(candidate, candidate.digest, recipients=peer_ids)]
        if equivocating:
            sibling = BlockHeader(
                prev_header_hash=candidate.prev_header_hash,
                index=candidate.index,
                created_at=candidate.created_at,
                expires_at=candidate.expires_at,
                policy=candidate.policy,
                owner_key=self.rng.randbytes(32),
            )
            split = self.rng.randint(1, len(peer_ids) - 1)
            shuffled = list(peer_ids)
            self.rng.shuffle(shuffled)
            tracks[0].recipients = shuffled[:split]
            tracks.append(_Track(sibling, sibling.digest, recipients=shuffled[split:]))
            self._bump("byz_equivocations")
        timer_id = self.net.set_timer(
            self.node_id, self.timeout_us, ("instance", candidate.digest)
        )
        self._instance = _LeaderInstance(
            owner_key=key,
            tracks=tracks,
            created_us=clock.now_us,
            timer_id=timer_id,
        )
        request_type = (
            codec.MSG_WITNESS_REQUEST
            if self.cfg.algorithm is Algorithm.WITNESS
            else codec.MSG_PRE_PREPARE
        )
        for track in tracks:
            frame = bytes([request_type]) + track.candidate.encode()
            if self.cfg.algorithm is Algorithm.PBFT:
                track.prepare_voters.add(self.pair.public)
            for nid in track.recipients:
                self._send_peer(nid, frame)
        if self.cfg.algorithm is Algorithm.WITNESS:
            for track in tracks:
                self._check_witness_quorum(track, clock)
        else:
            for track in tracks:
                self._check_prepare_quorum_leader(track, clock)

    def _witness_minimum(self) -> int:
        return 0 if self.cfg.size == 1 else self.cfg.witness_minimum

    def _find_track(self, digest: bytes) -> Optional[_Track]:
        if self._instance is None:
            return None
        for track in self._instance.tracks:
            if track.digest == digest:
                return track
        return None

    # -- witness flow --------------------------------------------------

    def _on_witness_request(self, sender: str, frame: bytes, clock: WorkClock) -> None:
        clock.spend(self.service.candidate_validate_us)
        reader = Reader(frame, pos=1)
        candidate = decode_header(reader)
        reader.expect_end()
        if sender not in self.peers:
            return
        self._consider_witness_candidate(sender, candidate, clock)

    def _consider_witness_candidate(
        self, sender: str, candidate: BlockHeader, clock: WorkClock
    ) -> None:
        index = candidate.index
        state = self._vstates.get(index)
        if state is not None:
            if state.candidate_hash != candidate.digest:
                self._bump("equivocation_observed")
            return
        reject = validate_candidate(self.chain, candidate)
        if reject is not None:
            if self._hold_candidate("witness", sender, candidate, reject):
                return
            self._reject(reject)
            return
        self._new_vstate(index, candidate.digest, sender)
        vote = make_vote(candidate.digest, Phase.VALIDATE, self.pair)
        self._send_peer(sender, bytes([codec.MSG_WITNESS_VOTE]) + vote.encode())

    def _on_witness_vote(self, sender: str, frame: bytes, clock: WorkClock) -> None:
        clock.spend(self.service.vote_process_us)
        reader = Reader(frame, pos=1)
        vote = decode_vote(reader)
        reader.expect_end()
        track = self._find_track(vote.header_hash)
        if track is None:
            self._bump("stray_vote")
            return
        if (
            vote.phase is not Phase.VALIDATE
            or vote.voter not in self.gateway_keys
            or vote.voter == self.pair.public
            or not vote_valid(vote)
        ):
            self._bump("invalid_vote")
            return
        track.validate_votes[vote.voter] = vote
        self._check_witness_quorum(track, clock)

    def _check_witness_quorum(self, track: _Track, clock: WorkClock) -> None:
        if self._instance is None:
            return
        if len(track.validate_votes) >= self._witness_minimum():
            decision = ConsensusDecision(
                header=track.candidate,
                votes=tuple(track.validate_votes.values()),
                algorithm=Algorithm.WITNESS,
            )
            self._commit_decision(track, decision, clock)

    # -- pbft flow -----------------------------------------------------

    def _new_vstate(self, index: int, digest: bytes, leader_id: str) -> None:
        leader_key = self.peers.get(leader_id)
        voters = {self.pair.public}
        if leader_key is not None:
            voters.add(leader_key)
        self._vstates[index] = _ValidatorState(
            candidate_hash=digest, leader_id=leader_id, prepare_voters=voters
        )
        self._vhash[digest] = index
        self.net.set_timer(self.node_id, self.vstate_gc_us, ("vgc", index))

    def _on_pre_prepare(self, sender: str, frame: bytes, clock: WorkClock) -> None:
        clock.spend(self.service.candidate_validate_us)
        reader = Reader(frame, pos=1)
        candidate = decode_header(reader)
        reader.expect_end()
        if sender not in self.peers:
            return
        self._consider_pre_prepare(sender, candidate, clock)

    def _consider_pre_prepare(
        self, sender: str, candidate: BlockHeader, clock: WorkClock
    ) -> None:
        index = candidate.index
        state = self._vstates.get(index)
        if state is not None:
            if state.candidate_hash != candidate.digest:
                self._bump("equivocation_observed")
            return
        reject = validate_candidate(self.chain, candidate)
        if reject is not None:
            if self._hold_candidate("pbft", sender, candidate, reject):
                return
            self._reject(reject)
            return
        self._new_vstate(index, candidate.digest, sender)
        state = self._vstates[index]
        early = self._early_prepares.pop(candidate.digest, None)
        if early:
            state.prepare_voters.update(early)
        vote = make_vote(candidate.digest, Phase.PREPARE, self.pair)
        self._broadcast_peers(bytes([codec.MSG_PREPARE]) + vote.encode())
        self._check_prepare_quorum_validator(index, state, clock)

    def _hold_candidate(
        self, kind: str, sender: str, candidate: BlockHeader, reject: Reject
    ) -> bool:
        """Stash a candidate that is ahead of this replica (the proposing
        leader already applied a block we have not received yet); it is
        reconsidered as soon as the chain grows."""
        if reject is not Reject.BAD_INDEX or candidate.index <= len(self.chain):
            return False
        self._held_candidates[candidate.digest] = (kind, sender, candidate)
        while len(self._held_candidates) > 8:
            self._held_candidates.pop(next(iter(self._held_candidates)))
        return True

    def _drain_held_candidates(self, clock: WorkClock) -> None:
        if not self._held_candidates:
            return
        ready = [
            digest
            for digest, (_, _, candidate) in self._held_candidates.items()
            if candidate.index <= len(self.chain) + 1
        ]
        for digest in ready:
            kind, sender, candidate = self._held_candidates.pop(digest)
            if candidate.index <= len(self.chain):
                continue  # obsolete: that slot is already filled
            if kind == "witness":
                self._consider_witness_candidate(sender, candidate, clock)
            else:
                self._consider_pre_prepare(sender, candidate, clock)

    def _on_prepare(self, sender: str, frame: bytes, clock: WorkClock) -> None:
        clock.spend(self.service.vote_process_us)
        reader = Reader(frame, pos=1)
        vote = decode_vote(reader)
        reader.expect_end()
        if (
            vote.phase is not Phase.PREPARE
            or vote.voter not in self.gateway_keys
            or not vote_valid(vote)
        ):
            self._bump("invalid_vote")
            return
        track = self._find_track(vote.header_hash)
        if track is not None:
            track.prepare_voters.add(vote.voter)
            self._check_prepare_quorum_leader(track, clock)
            return
        index = self._vhash.get(vote.header_hash)
        if index is not None:
            state = self._vstates[index]
            state.prepare_voters.add(vote.voter)
            self._check_prepare_quorum_validator(index, state, clock)
            return
        early = self._early_prepares.setdefault(vote.header_hash, {})
        early[vote.voter] = vote
        if len(self._early_prepares) > 64:
            self._early_prepares.pop(next(iter(self._early_prepares)))

    def _check_prepare_quorum_validator(
        self, index: int, state: _ValidatorState, clock: WorkClock
    ) -> None:
        if state.commit_sent or len(state.prepare_voters) < self.cfg.quorum:
            return
        state.commit_sent = True
        vote = make_vote(state.candidate_hash, Phase.COMMIT, self.pair)
        self._send_peer(state.leader_id, bytes([codec.MSG_COMMIT]) + vote.encode())

    def _check_prepare_quorum_leader(self, track: _Track, clock: WorkClock) -> None:
        if track.commit_sent or len(track.prepare_voters) < self.cfg.quorum:
            return
        track.commit_sent = True
        vote = make_vote(track.digest, Phase.COMMIT, self.pair)
        track.commit_votes[vote.voter] = vote
        if self.byzantine is ByzantineStrategy.EQUIVOCATE:
            # a double-dealing leader also pledges commit on every sibling
            for other in self._instance.tracks if self._instance else ():
                if other is not track and not other.commit_sent:
                    other.commit_sent = True
                    alt = make_vote(other.digest, Phase.COMMIT, self.pair)
                    other.commit_votes[alt.voter] = alt
        self._check_commit_quorum(track, clock)

    def _on_commit(self, sender: str, frame: bytes, clock: WorkClock) -> None:
        clock.spend(self.service.vote_process_us)
        reader = Reader(frame, pos=1)
        vote = decode_vote(reader)
        reader.expect_end()
        track = self._find_track(vote.header_hash)
        if track is None:
            self._bump("stray_vote")
            return
        if (
            vote.phase is not Phase.COMMIT
            or vote.voter not in self.gateway_keys
            or not vote_valid(vote)
        ):
            self._bump("invalid_vote")
            return
        track.commit_votes[vote.voter] = vote
        self._check_commit_quorum(track, clock)

    def _check_commit_quorum(self, track: _Track, clock: WorkClock) -> None:
        if self._instance is None:
            return
        if len(track.commit_votes) >= self.cfg.quorum:
            decision = ConsensusDecision(
                header=track.candidate,
                votes=tuple(track.commit_votes.values()),
                algorithm=Algorithm.PBFT,
            )
            self._commit_decision(track, decision, clock)

    # -- decision handling --------------------------------------------

    def _decision_targets(self, track: _Track) -> Optional[list[str]]:
        """Where the committed decision gets broadcast; ``None`` means all
        peers, an explicit list restricts it (byzantine behaviours)."""
        if self.byzantine is not ByzantineStrategy.EQUIVOCATE:
            return None
        if self.cfg.algorithm is Algorithm.WITNESS:
            # commit silently: the weakness under a too-small witness set is
            # that nobody else ever learns about this block
            return []
        voters = {self.key_to_peer.get(pk) for pk in track.commit_votes}
        return [nid for nid in voters if nid is not None]

    def _commit_decision(
        self, track: _Track, decision: ConsensusDecision, clock: WorkClock
    ) -> None:
        instance = self._instance
        assert instance is not None
        self.sink.record(
            self.node_id,
            metrics.BLOCK_CONSENSUS,
            clock.now_us - instance.created_us,
        )
        decision_us = clock.now_us
        clock.spend(self.service.block_apply_leader_us)
        exclude = (
            self.pair.public if self.cfg.algorithm is Algorithm.WITNESS else None
        )
        reject = self.chain.append_block(
            track.candidate,
            decision,
            lambda proof: verify_decision(proof, self.cfg, exclude=exclude),
        )
        if reject is not None:
            # the chain moved underneath the instance (lost a race)
            self._bump("conflict_detected")
            self.net.cancel_timer(instance.timer_id)
            self._instance = None
            if not instance.retried and self.chain.lookup(instance.owner_key) is None:
                self._retry_instance(instance.owner_key, clock)
            else:
                self._maybe_start_instance(clock)
            return
        index = track.candidate.index
        self.sink.record(
            self.node_id, metrics.ADD_BLOCK_LEADER, clock.now_us - decision_us
        )
        self.decisions[index] = decision
        if self.journal is not None:
            self.journal.write_header(track.candidate)
        self.net.cancel_timer(instance.timer_id)
        self._instance = None
        targets = self._decision_targets(track)
        frame = (
            bytes([codec.MSG_PEER_BLOCK])
            + track.candidate.encode()
            + decision.encode()
        )
        self._echoed.add(track.digest)
        if targets is None:
            self._broadcast_peers(frame)
        else:
            for nid in targets:
                self._send_peer(nid, frame)
        self._resolve_committed(track.candidate, clock)
        self._drain_peer_buffers(clock)
        self._maybe_start_instance(clock)

    def _retry_instance(self, key: PublicKey, clock: WorkClock) -> None:
        self._start_instance(key, clock)
        if self._instance is not None:
            self._instance.retried = True

    def _on_instance_timeout(self, digest: bytes, clock: WorkClock) -> None:
        instance = self._instance
        if instance is None or all(t.digest != digest for t in instance.tracks):
            return
        self._bump("consensus_timeout")
        self._instance = None
        if not instance.retried and self.chain.lookup(instance.owner_key) is None:
            self._retry_instance(instance.owner_key, clock)
        else:
            self._maybe_start_instance(clock)

    def _resolve_committed(self, header: BlockHeader, clock: WorkClock) -> None:
        key = header.owner_key
        if key == self.pair.public:
            self.identity_committed = True
        pending = self._pending_connects.pop(key, None)
        if pending is not None:
            self.net.cancel_timer(pending.timer_id)
            device_id = pending.origin
            if device_id is not None:
                rotation = self._rotations.get(device_id)
                if rotation is not None and rotation.new_key == key:
                    self.net.cancel_timer(rotation.timer_id)
                    del self._rotations[device_id]
                    session = self._sessions[device_id]
                    session.history.append(session.current_key)
                    session.current_key = key
                    self._send_status(device_id, StatusCode.KEY_UPDATED)
                else:
                    self._send_status(device_id, StatusCode.ONBOARDED)
        # a committed block settles any validator state at that index
        state = self._vstates.pop(header.index, None)
        if state is not None:
            self._vhash.pop(state.candidate_hash, None)

    def _on_connect_timeout(self, key: PublicKey, clock: WorkClock) -> None:
        pending = self._pending_connects.get(key)
        if pending is None:
            return
        if self.chain.lookup(key) is not None:
            del self._pending_connects[key]
            return
        # rotate our view of the leader and try again; insertion is retried
        # until the key lands on the chain, so a slow or silent leader only
        # delays onboarding instead of losing the device
        if pending.attempts >= ROUND_ADVANCE_ATTEMPTS:
            self.round += 1
        pending.attempts += 1
        self._bump("connect_retry")
        pending.timer_id = self.net.set_timer(
            self.node_id, self.connect_timeout_us, ("connect", key)
        )
        self._forward_or_propose(key, clock)

    def _gc_vstate(self, index: int) -> None:
        state = self._vstates.get(index)
        if state is not None and len(self.chain) < index:
            del self._vstates[index]
            self._vhash.pop(state.candidate_hash, None)

    # ------------------------------------------------------------------
    # key rotation

    def _begin_rotation(self, device_id: str, clock: WorkClock) -> None:
        if device_id in self._rotations:
            return
        session = self._sessions.get(device_id)
        if session is None:
            return
        timer_id = self.net.set_timer(
            self.node_id, self.key_update_timeout_us, ("rotation", device_id)
        )
        self._rotations[device_id] = _Rotation(
            old_key=session.current_key, timer_id=timer_id
        )
        self._bump("rotations_started")
        self.net.send(
            self.node_id, device_id, bytes([codec.MSG_NEW_KEY_REQUEST])
        )

    def _on_rotation_timeout(self, device_id: str, clock: WorkClock) -> None:
        rotation = self._rotations.pop(device_id, None)
        if rotation is None:
            return
        if rotation.new_key is not None and self.chain.lookup(rotation.new_key):
            return
        self._reject(Reject.KEY_UPDATE_TIMEOUT)
        self._send_status(device_id, StatusCode.KEY_UPDATE_TIMEOUT)

    # ------------------------------------------------------------------
    # peer replication

    def _on_peer_transaction(self, sender: str, frame: bytes, clock: WorkClock) -> None:
        clock.spend(self.service.peer_tx_us)
        if len(frame) <= 1 + codec.DIGEST_SIZE:
            raise DecodeError("peer transaction frame too short")
        header_digest = frame[-codec.DIGEST_SIZE:]
        # interning by content digest: replicas of an already-seen
        # transaction skip decoding entirely
        tx, digest = intern_transaction(frame[1:-codec.DIGEST_SIZE])
        self._apply_peer_transaction(
            sender, tx, digest, header_digest, clock.arrive_us, clock
        )
        # a reordered predecessor may have just filled the gap some buffered
        # entry was waiting on
        self._drain_peer_buffers(clock)

    def _apply_peer_transaction(
        self,
        sender: str,
        tx: Transaction,
        digest: bytes,
        header_digest: bytes,
        arrive_us: int,
        clock: WorkClock,
        *,
        buffered: bool = False,
    ) -> bool:
        """Returns True when the entry is settled (applied or dropped for
        good); False when it was stashed for another attempt."""
        block_index = self.chain.block_by_header(header_digest)
        if block_index is None:
            if not buffered:
                self._reject(Reject.UNKNOWN_BLOCK)
                self._buffer_peer_tx(clock, sender, tx, digest, header_digest, arrive_us)
                return False
            return False
        ledger_len = len(self.chain.block(block_index).ledger)
        reject = self.chain.append_transaction(
            block_index, tx, gateway_keys=self.gateway_keys, tx_digest=digest
        )
        if reject is None:
            self.sink.record(
                self.node_id, metrics.UPDATE_TX, clock.now_us - arrive_us
            )
            if self.journal is not None:
                self.journal.write_transaction(tx)
            return True
        if reject is Reject.BAD_INDEX and tx.index > ledger_len + 1:
            if not buffered:
                self._reject(reject)
                self._buffer_peer_tx(clock, sender, tx, digest, header_digest, arrive_us)
                return False
            return False
        self._reject(reject)
        return True

    def _buffer_peer_tx(
        self,
        clock: WorkClock,
        sender: str,
        tx: Transaction,
        digest: bytes,
        header_digest: bytes,
        arrive_us: int,
    ) -> None:
        buffer = self._peer_tx_buffer.get(sender)
        if buffer is None:
            buffer = self._peer_tx_buffer[sender] = deque(maxlen=PEER_BUFFER_LIMIT)
        if len(buffer) == PEER_BUFFER_LIMIT:
            # the oldest entry is about to fall off; schedule a ledger sync
            # from its block onward so the gap is repaired out of band
            self._bump("peer_buffer_overflow")
            evicted_header = buffer[0][2]
            evicted_index = self.chain.block_by_header(evicted_header)
            self._request_sync(clock, from_index=evicted_index, target=sender)
        buffer.append((tx, digest, header_digest, arrive_us))

    def _drain_peer_buffers(self, clock: WorkClock) -> None:
        progressed = True
        while progressed:
            progressed = False
            for sender, buffer in self._peer_tx_buffer.items():
                kept = []
                for entry in buffer:
                    tx, digest, header_digest, arrive_us = entry
                    clock.spend(self.service.peer_tx_us)
                    settled = self._apply_peer_transaction(
                        sender, tx, digest, header_digest, arrive_us, clock,
                        buffered=True,
                    )
                    if settled:
                        progressed = True
                    else:
                        kept.append(entry)
                if len(kept) != len(buffer):
                    buffer.clear()
                    buffer.extend(kept)

    def _on_peer_block(self, sender: str, frame: bytes, clock: WorkClock) -> None:
        clock.spend(self.service.block_apply_follower_us)
        reader = Reader(frame, pos=1)
        header = decode_header(reader)
        decision = decode_decision(reader)
        reader.expect_end()
        if decision.header != header:
            self._bump("decision_header_mismatch")
            return
        self._apply_peer_block(sender, header, decision, clock, echo=True)

    def _apply_peer_block(
        self,
        sender: str,
        header: BlockHeader,
        decision: ConsensusDecision,
        clock: WorkClock,
        *,
        echo: bool,
        record_metric: bool = True,
    ) -> bool:
        reject = self.chain.append_block(
            header, decision, lambda proof: verify_decision(proof, self.cfg)
        )
        if reject is None:
            if record_metric:
                self.sink.record(
                    self.node_id,
                    metrics.UPDATE_BLOCK,
                    clock.now_us - clock.arrive_us,
                )
            self.decisions[header.index] = decision
            if self.journal is not None:
                self.journal.write_header(header)
            self._resolve_committed(header, clock)
            if echo and header.digest not in self._echoed:
                self._echoed.add(header.digest)
                self._broadcast_peers(
                    bytes([codec.MSG_PEER_BLOCK])
                    + header.encode()
                    + decision.encode(),
                    exclude=sender,
                )
            self._check_instance_conflict(clock)
            self._drain_peer_buffers(clock)
            self._drain_held_candidates(clock)
            return True
        if reject is Reject.BAD_INDEX and header.index <= len(self.chain):
            return True  # stale duplicate, already have it
        if reject is Reject.BAD_PREV_HASH:
            self._reject(reject)
            self._request_sync(clock)
            return False
        self._reject(reject)
        return False

    def _check_instance_conflict(self, clock: WorkClock) -> None:
        instance = self._instance
        if instance is None:
            return
        if any(t.candidate.index > len(self.chain) for t in instance.tracks):
            return
        self._bump("conflict_detected")
        self.net.cancel_timer(instance.timer_id)
        self._instance = None
        if not instance.retried and self.chain.lookup(instance.owner_key) is None:
            self._retry_instance(instance.owner_key, clock)
        else:
            self._maybe_start_instance(clock)

    # ------------------------------------------------------------------
    # state sync

    def _request_sync(
        self,
        clock: WorkClock,
        *,
        from_index: Optional[int] = None,
        target: Optional[str] = None,
    ) -> None:
        if self._sync_pending:
            return
        if target is None:
            target = self._leader_node_id()
        if target is None:
            target = next(iter(self.peers), None)
        if target is None:
            return
        if from_index is None:
            from_index = len(self.chain) + 1
        self._sync_pending = True
        self.net.set_timer(self.node_id, 2 * self.timeout_us, ("sync",))
        self._send_peer(
            target,
            bytes([codec.MSG_SYNC_REQUEST]) + codec.pack_u64(max(1, from_index)),
        )

    def _on_sync_request(self, sender: str, frame: bytes, clock: WorkClock) -> None:
        clock.spend(self.service.sync_serve_us)
        reader = Reader(frame, pos=1)
        from_index = reader.read_u64()
        reader.expect_end()
        if sender not in self.peers:
            return
        parts = [bytes([codec.MSG_SYNC_RESPONSE]), codec.pack_u64(from_index)]
        blocks = []
        for index in range(from_index, len(self.chain) + 1):
            decision = self.decisions.get(index)
            if decision is None:
                break
            block = self.chain.block(index)
            chunk = [block.header.encode(), decision.encode()]
            chunk.append(codec.pack_u32(len(block.ledger)))
            chunk.extend(tx.encode() for tx in block.ledger)
            blocks.append(b"".join(chunk))
        parts.append(codec.pack_u32(len(blocks)))
        parts.extend(blocks)
        self._send_peer(sender, b"".join(parts))

    def _on_sync_response(self, sender: str, frame: bytes, clock: WorkClock) -> None:
        reader = Reader(frame, pos=1)
        from_index = reader.read_u64()
        count = reader.read_u32()
        self._sync_pending = False
        applied_blocks = 0
        aborted = False
        for _ in range(count):
            header = decode_header(reader)
            decision = decode_decision(reader)
            tx_count = reader.read_u32()
            txs = [decode_transaction(reader) for _ in range(tx_count)]
            if aborted:
                continue  # finish decoding for strictness, apply nothing
            clock.spend(self.service.block_apply_follower_us)
            if header.index == len(self.chain) + 1:
                if not self._apply_peer_block(
                    sender, header, decision, clock, echo=False,
                    record_metric=False,
                ):
                    aborted = True
                    continue
                applied_blocks += 1
            block_index = self.chain.block_by_header(header.digest)
            if block_index is None:
                continue
            for tx in txs:
                clock.spend(self.service.peer_tx_us)
                tx, digest = intern_decoded(tx, None)
                self.chain.append_transaction(
                    block_index, tx,
                    gateway_keys=self.gateway_keys, tx_digest=digest,
                )
        reader.expect_end()
        if applied_blocks:
            self._bump("sync_blocks_applied", applied_blocks)
            self._drain_peer_buffers(clock)
            self._drain_held_candidates(clock)
