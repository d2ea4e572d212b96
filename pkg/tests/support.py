"""Shared builders for the test suite: small valid chains made through the
public construction APIs, plus vote/decision assembly for consensus proofs."""

from __future__ import annotations

from random import Random
from typing import Optional, Sequence

from appendchain.chain import (
    Blockchain,
    BlockHeader,
    Transaction,
    build_transaction,
    register_transaction,
)
from appendchain.consensus import (
    Algorithm,
    ConsensusDecision,
    Phase,
    build_candidate,
    make_vote,
)
from appendchain.crypto import KeyPair, generate_keypair
from appendchain.devices import make_info, payload_bytes

HOUR_MS = 3_600_000
BASE_MS = 1_700_000_000_000


def accept_all(proof: object) -> bool:
    return True


def make_pairs(rng: Random, count: int) -> list[KeyPair]:
    return [generate_keypair(rng) for _ in range(count)]


def make_decision(
    header: BlockHeader,
    voters: Sequence[KeyPair],
    algorithm: Algorithm = Algorithm.WITNESS,
    phase: Optional[Phase] = None,
) -> ConsensusDecision:
    if phase is None:
        phase = (
            Phase.VALIDATE if algorithm is Algorithm.WITNESS else Phase.COMMIT
        )
    votes = tuple(make_vote(header.digest, phase, pair) for pair in voters)
    return ConsensusDecision(header=header, votes=votes, algorithm=algorithm)


def grow_block(
    chain: Blockchain,
    owner: KeyPair,
    gateway: KeyPair,
    *,
    tx_count: int = 0,
    ttl_ms: int = HOUR_MS,
    now_ms: int = BASE_MS,
    access_levels: Sequence[int] = (0,),
    payload_size: int = 24,
) -> int:
    """Append one block for ``owner`` plus ``tx_count`` signed entries.

    Returns the new block's index.  Raises on any rejection so broken
    builders fail loudly instead of producing half-formed chains.
    """
    candidate = build_candidate(chain, owner.public, "default", ttl_ms, now_ms)
    reject = chain.append_block(candidate, None, accept_all)
    if reject is not None:
        raise AssertionError(f"builder block rejected: {reject}")
    index = chain.lookup(owner.public)
    assert index is not None
    for seq in range(tx_count):
        info = make_info(
            owner,
            payload_bytes(owner.public, seq, payload_size),
            now_ms + 1 + seq,
            access_level=access_levels[seq % len(access_levels)],
        )
        tx = build_transaction(chain, index, info, gateway)
        reject = chain.append_transaction(
            index, tx,
            gateway_keys=None, tx_digest=register_transaction(tx),
        )
        if reject is not None:
            raise AssertionError(f"builder transaction rejected: {reject}")
    return index


def build_chain(
    rng: Random,
    *,
    blocks: int = 3,
    txs_per_block: int = 10,
    gateway_count: int = 1,
    ttl_ms: int = HOUR_MS,
) -> tuple[Blockchain, list[KeyPair], list[KeyPair]]:
    """A valid chain: ``gateway_count`` gateway identity blocks first, then
    ``blocks`` device blocks each carrying ``txs_per_block`` entries signed
    by a round-robin gateway.  Returns (chain, gateway pairs, device pairs).
    """
    chain = Blockchain()
    gateways = make_pairs(rng, gateway_count)
    for pair in gateways:
        grow_block(chain, pair, pair, tx_count=0, ttl_ms=ttl_ms)
    devices = make_pairs(rng, blocks)
    for i, owner in enumerate(devices):
        grow_block(
            chain,
            owner,
            gateways[i % gateway_count],
            tx_count=txs_per_block,
            ttl_ms=ttl_ms,
        )
    return chain, gateways, devices


def clone_via_encoding(chain: Blockchain) -> list[tuple[bytes, list[bytes]]]:
    """Raw (header bytes, [tx bytes...]) image used for mutation tests."""
    image = []
    for block in chain.blocks:
        image.append(
            (block.header.encode(), [tx.encode() for tx in block.ledger])
        )
    return image


def rebuild_unchecked(
    image: list[tuple[bytes, list[bytes]]]
) -> Blockchain:
    """Reassemble a chain from raw encodings without any validation, so
    tamper checks can be pointed at deliberately broken material."""
    from appendchain.chain import decode_header, decode_transaction
    from appendchain.codec import Reader

    chain = Blockchain()
    for header_bytes, tx_blobs in image:
        header = decode_header(Reader(header_bytes))
        chain.blocks.append(_raw_block(header))
        chain.key_index[header.owner_key] = header.index
        chain.header_index[header.digest] = header.index
        for blob in tx_blobs:
            tx = decode_transaction(Reader(blob))
            block = chain.blocks[-1]
            block.ledger.append(tx)
    return chain


def _raw_block(header):
    from appendchain.chain import Block

    return Block(header)
