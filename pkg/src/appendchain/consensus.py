"""Pluggable block-insertion consensus: witness voting and adapted PBFT.

This module holds the pure pieces — candidate construction and validation,
vote signing, decision verification and round-robin leader election.  The
actual message exchange is driven by the gateway node, which calls into
these functions from its handlers.

Quorum for the PBFT variant is ``floor(2n/3) + 1`` distinct voters out of
``n`` configured gateways.  Witness mode instead needs a configurable number
of distinct validator votes, not counting the proposing leader.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from . import codec, crypto
from .chain import (
    BadExpiryError,
    BlockHeader,
    Blockchain,
    DuplicateKeyError,
    PublicKey,
    Reject,
    decode_header,
)
from .codec import Reader

logger = logging.getLogger(__name__)


class Algorithm(Enum):
    WITNESS = 0
    PBFT = 1

    def __str__(self) -> str:
        return self.name.lower()


class Phase(Enum):
    VALIDATE = 0
    PREPARE = 1
    COMMIT = 2


def quorum(n: int) -> int:
    """Votes needed for a PBFT-style decision among ``n`` gateways."""
    return (2 * n) // 3 + 1


@dataclass(frozen=True)
class ConsensusConfig:
    """Static consensus membership and parameters, fixed per scenario."""

    algorithm: Algorithm
    gateways: tuple[PublicKey, ...]
    witness_minimum: int = 2
    leader_index: int = 0
    timeout_ms: int = 500

    def __post_init__(self) -> None:
        n = len(self.gateways)
        if n == 0:
            raise ValueError("at least one gateway is required")
        if len(set(self.gateways)) != n:
            raise ValueError("gateway keys must be distinct")
        if not 0 <= self.leader_index < n:
            raise ValueError(f"leader_index {self.leader_index} out of range")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.algorithm is Algorithm.WITNESS:
            if n == 1:
                if self.witness_minimum != 0:
                    raise ValueError(
                        "witness_minimum must be 0 for a single gateway"
                    )
            elif not 1 <= self.witness_minimum <= n - 1:
                raise ValueError(
                    f"witness_minimum {self.witness_minimum} outside "
                    f"[1, {n - 1}]"
                )

    @property
    def size(self) -> int:
        return len(self.gateways)

    @property
    def quorum(self) -> int:
        return quorum(len(self.gateways))


def elect_leader(cfg: ConsensusConfig, round_number: int) -> PublicKey:
    """Round-robin leader: rounds advance when a consensus attempt times
    out, rotating proposal rights through the configured gateway order."""
    if round_number < 0:
        raise ValueError("round_number must be non-negative")
    n = len(cfg.gateways)
    return cfg.gateways[(cfg.leader_index + round_number) % n]


@dataclass(frozen=True)
class Vote:
    """A gateway's signed endorsement of a candidate header in one phase."""

    header_hash: bytes
    voter: PublicKey
    phase: Phase
    sig: bytes

    def signed_payload(self) -> bytes:
        return vote_payload(self.header_hash, self.phase)

    def encode(self) -> bytes:
        return b"".join(
            (
                codec.pack_digest(self.header_hash),
                codec.pack_bytes(self.voter),
                codec.pack_u64(self.phase.value),
                codec.pack_bytes(self.sig),
            )
        )


def vote_payload(header_hash: bytes, phase: Phase) -> bytes:
    return codec.pack_digest(header_hash) + codec.pack_u64(phase.value)


def make_vote(header_hash: bytes, phase: Phase, pair: crypto.KeyPair) -> Vote:
    return Vote(
        header_hash=header_hash,
        voter=pair.public,
        phase=phase,
        sig=crypto.sign(pair.secret, vote_payload(header_hash, phase)),
    )


def vote_valid(vote: Vote) -> bool:
    return crypto.verify(vote.voter, vote.signed_payload(), vote.sig)


def decode_vote(reader: Reader) -> Vote:
    header_hash = reader.read_digest()
    voter = reader.read_bytes()
    phase_value = reader.read_u64()
    try:
        phase = Phase(phase_value)
    except ValueError:
        raise codec.DecodeError(f"unknown vote phase {phase_value}") from None
    return Vote(
        header_hash=header_hash,
        voter=voter,
        phase=phase,
        sig=reader.read_bytes(),
    )


@dataclass(frozen=True)
class ConsensusDecision:
    """A committed candidate plus the votes that justify it.

    This object travels with every replicated block so that receivers can
    check the quorum themselves before appending.
    """

    header: BlockHeader
    votes: tuple[Vote, ...]
    algorithm: Algorithm

    def encode(self) -> bytes:
        parts = [self.header.encode(), codec.pack_u32(len(self.votes))]
        parts.extend(v.encode() for v in self.votes)
        parts.append(codec.pack_u64(self.algorithm.value))
        return b"".join(parts)


def decode_decision(reader: Reader) -> ConsensusDecision:
    header = decode_header(reader)
    count = reader.read_u32()
    votes = tuple(decode_vote(reader) for _ in range(count))
    algorithm_value = reader.read_u64()
    try:
        algorithm = Algorithm(algorithm_value)
    except ValueError:
        raise codec.DecodeError(
            f"unknown consensus algorithm {algorithm_value}"
        ) from None
    return ConsensusDecision(header=header, votes=votes, algorithm=algorithm)


def build_candidate(
    chain: Blockchain,
    owner_key: PublicKey,
    policy: str,
    ttl_ms: int,
    now_ms: int,
) -> BlockHeader:
    """Next-index candidate header for ``owner_key`` on top of ``chain``.

    Raises :class:`DuplicateKeyError` when the key already owns a block and
    :class:`BadExpiryError` for a non-positive lifetime.
    """
    if ttl_ms <= 0:
        raise BadExpiryError(f"ttl_ms must be positive, got {ttl_ms}")
    if chain.lookup(owner_key) is not None:
        raise DuplicateKeyError(
            f"key {owner_key.hex()[:16]}.. already owns a block"
        )
    return BlockHeader(
        prev_header_hash=chain.tip_header_digest,
        index=len(chain) + 1,
        created_at=now_ms,
        expires_at=now_ms + ttl_ms,
        policy=policy,
        owner_key=owner_key,
    )


def validate_candidate(
    chain: Blockchain, candidate: BlockHeader
) -> Optional[Reject]:
    """Validator-side check of a proposed header against the local replica.

    Returns ``None`` when the candidate extends this replica, otherwise the
    first failing gate (the same gates :meth:`Blockchain.append_block`
    applies, minus the quorum check that does not exist yet).
    """
    if candidate.index != len(chain) + 1:
        return Reject.BAD_INDEX
    if candidate.prev_header_hash != chain.tip_header_digest:
        return Reject.BAD_PREV_HASH
    if candidate.owner_key in chain.key_index:
        return Reject.DUPLICATE_KEY
    if candidate.expires_at <= candidate.created_at:
        return Reject.BAD_EXPIRY
    return None


def verify_decision(
    decision: ConsensusDecision,
    cfg: ConsensusConfig,
    exclude: Optional[PublicKey] = None,
) -> bool:
    """True iff the decision's votes satisfy the configured quorum rule.

    Only votes that are signed by configured gateways over this decision's
    header count.  ``exclude`` drops one voter from the tally — callers that
    know who proposed the block pass the proposer, enforcing that a witness
    quorum is made of actual witnesses rather than the leader endorsing
    itself.
    """
    if decision.algorithm is not cfg.algorithm:
        return False
    members = set(cfg.gateways)
    header_hash = decision.header.digest
    wanted_phase = (
        Phase.VALIDATE
        if cfg.algorithm is Algorithm.WITNESS
        else Phase.COMMIT
    )
    voters: set[PublicKey] = set()
    for vote in decision.votes:
        if vote.phase is not wanted_phase:
            continue
        if vote.header_hash != header_hash:
            continue
        if vote.voter not in members or vote.voter == exclude:
            continue
        if vote.voter in voters:
            continue
        if not vote_valid(vote):
            continue
        voters.add(vote.voter)
    if cfg.algorithm is Algorithm.WITNESS:
        needed = 0 if cfg.size == 1 else cfg.witness_minimum
    else:
        needed = cfg.quorum
    return len(voters) >= needed
