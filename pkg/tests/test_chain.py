"""Chain construction, append gates, and tamper detection.

Hash-link values are recomputed with hashlib directly so the chain's own
digest helpers are being checked against an independent calculation.
"""

from __future__ import annotations

import dataclasses
import hashlib
from random import Random

import pytest

from appendchain.chain import (
    BadExpiryError,
    Blockchain,
    BlockHeader,
    DuplicateKeyError,
    ExpiredBlockError,
    Reject,
    Transaction,
    build_transaction,
    decode_header,
    decode_transaction,
    device_sig_valid,
    gateway_sig_valid,
    intern_decoded,
    intern_transaction,
    iter_transactions,
    register_transaction,
    verify_chain,
)
from appendchain.codec import Reader
from appendchain.crypto import ZERO_DIGEST, generate_keypair, sha256, sign
from appendchain.devices import make_info, payload_bytes

from support import (
    BASE_MS,
    HOUR_MS,
    accept_all,
    build_chain,
    clone_via_encoding,
    grow_block,
    make_pairs,
    rebuild_unchecked,
)


def _sha(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# ---------------------------------------------------------------------------
# transaction construction


def test_first_transaction_links_to_header_digest() -> None:
    rng = Random(21)
    chain = Blockchain()
    gw = generate_keypair(rng)
    dev = generate_keypair(rng)
    grow_block(chain, gw, gw)
    index = grow_block(chain, dev, gw)
    info = make_info(dev, b"first", BASE_MS + 5)
    tx = build_transaction(chain, index, info, gw)
    assert tx.index == 1
    assert tx.prev_hash == _sha(chain.block(index).header.encode())


def test_third_transaction_links_to_second_entry() -> None:
    rng = Random(22)
    chain = Blockchain()
    gw = generate_keypair(rng)
    dev = generate_keypair(rng)
    grow_block(chain, gw, gw)
    index = grow_block(chain, dev, gw, tx_count=2)
    second = chain.block(index).ledger[1]
    info = make_info(dev, b"third", BASE_MS + 50)
    tx = build_transaction(chain, index, info, gw)
    assert tx.index == 3
    assert tx.prev_hash == _sha(second.encode())


def test_transaction_against_expired_block_is_refused_at_build_time() -> None:
    rng = Random(23)
    chain = Blockchain()
    gw = generate_keypair(rng)
    dev = generate_keypair(rng)
    grow_block(chain, gw, gw)
    index = grow_block(chain, dev, gw, ttl_ms=1000)
    expires = chain.block(index).header.expires_at
    info = make_info(dev, b"late", expires)  # boundary: equality is expired
    with pytest.raises(ExpiredBlockError):
        build_transaction(chain, index, info, gw)


def test_gateway_signature_covers_the_device_info() -> None:
    rng = Random(24)
    chain = Blockchain()
    gw = generate_keypair(rng)
    dev = generate_keypair(rng)
    grow_block(chain, gw, gw)
    index = grow_block(chain, dev, gw)
    info = make_info(dev, b"reading", BASE_MS + 1)
    tx = build_transaction(chain, index, info, gw)
    assert tx.gateway_key == gw.public
    assert gateway_sig_valid(tx)
    forged = dataclasses.replace(tx, info=make_info(dev, b"other", BASE_MS + 2))
    assert not gateway_sig_valid(forged)


def test_device_signature_covers_payload_fields_only() -> None:
    rng = Random(25)
    dev = generate_keypair(rng)
    info = make_info(dev, b"data", BASE_MS, access_level=2, gps=(10, -20))
    assert device_sig_valid(info, dev.public)
    assert not device_sig_valid(info, generate_keypair(rng).public)
    for field, value in (
        ("access_level", 3),
        ("gps", (10, -21)),
        ("gps", None),
        ("data", b"datb"),
        ("produced_at", BASE_MS + 1),
    ):
        assert not device_sig_valid(
            dataclasses.replace(info, **{field: value}), dev.public
        )


# ---------------------------------------------------------------------------
# append gates


def test_append_transaction_accepts_in_order_entries() -> None:
    rng = Random(26)
    chain, gws, devs = build_chain(rng, blocks=1, txs_per_block=5)
    index = chain.lookup(devs[0].public)
    assert index is not None
    assert len(chain.block(index).ledger) == 5
    assert verify_chain(chain) is None


def test_replayed_transaction_is_rejected_as_duplicate() -> None:
    rng = Random(27)
    chain = Blockchain()
    gw = generate_keypair(rng)
    dev = generate_keypair(rng)
    grow_block(chain, gw, gw)
    index = grow_block(chain, dev, gw, tx_count=3)
    replay = chain.block(index).ledger[1]
    # precedence: the replay also carries a stale index, yet the content
    # collision must be what is reported
    assert (
        chain.append_transaction(index, replay, tx_digest=replay.digest)
        is Reject.DUPLICATE
    )
    assert len(chain.block(index).ledger) == 3


def test_out_of_order_transaction_is_rejected_as_bad_index() -> None:
    rng = Random(28)
    chain = Blockchain()
    gw = generate_keypair(rng)
    dev = generate_keypair(rng)
    grow_block(chain, gw, gw)
    index = grow_block(chain, dev, gw, tx_count=2)
    info = make_info(dev, b"skip ahead", BASE_MS + 90)
    good = build_transaction(chain, index, info, gw)
    skipped = dataclasses.replace(good, index=good.index + 1)
    assert (
        chain.append_transaction(index, skipped, tx_digest=skipped.digest)
        is Reject.BAD_INDEX
    )


def test_wrong_hash_link_is_rejected() -> None:
    rng = Random(29)
    chain = Blockchain()
    gw = generate_keypair(rng)
    dev = generate_keypair(rng)
    grow_block(chain, gw, gw)
    index = grow_block(chain, dev, gw, tx_count=1)
    info = make_info(dev, b"broken link", BASE_MS + 60)
    good = build_transaction(chain, index, info, gw)
    bad = dataclasses.replace(good, prev_hash=sha256(b"somewhere else"))
    assert (
        chain.append_transaction(index, bad, tx_digest=bad.digest)
        is Reject.BAD_HASH_LINK
    )


def test_unknown_block_index_is_rejected() -> None:
    rng = Random(30)
    chain = Blockchain()
    gw = generate_keypair(rng)
    dev = generate_keypair(rng)
    grow_block(chain, gw, gw)
    index = grow_block(chain, dev, gw)
    info = make_info(dev, b"nowhere", BASE_MS + 1)
    tx = build_transaction(chain, index, info, gw)
    assert chain.append_transaction(0, tx) is Reject.UNKNOWN_BLOCK
    assert chain.append_transaction(9, tx) is Reject.UNKNOWN_BLOCK


def test_foreign_device_signature_is_rejected() -> None:
    rng = Random(31)
    chain = Blockchain()
    gw = generate_keypair(rng)
    dev = generate_keypair(rng)
    intruder = generate_keypair(rng)
    grow_block(chain, gw, gw)
    index = grow_block(chain, dev, gw)
    info = make_info(intruder, b"not mine", BASE_MS + 1)
    tx = build_transaction(chain, index, info, gw)
    assert (
        chain.append_transaction(index, tx, tx_digest=tx.digest)
        is Reject.BAD_DEVICE_SIG
    )


def test_nonmember_gateway_countersignature_is_rejected() -> None:
    rng = Random(32)
    chain = Blockchain()
    gw = generate_keypair(rng)
    outsider = generate_keypair(rng)
    dev = generate_keypair(rng)
    grow_block(chain, gw, gw)
    index = grow_block(chain, dev, gw)
    info = make_info(dev, b"reading", BASE_MS + 1)
    tx = build_transaction(chain, index, info, outsider)
    members = frozenset([gw.public])
    assert (
        chain.append_transaction(
            index, tx, gateway_keys=members, tx_digest=tx.digest
        )
        is Reject.BAD_GATEWAY_SIG
    )
    # outsider is refused even without an explicit membership set because
    # it owns no block in the chain
    assert (
        chain.append_transaction(index, tx, tx_digest=tx.digest)
        is Reject.BAD_GATEWAY_SIG
    )


def test_expired_entry_is_rejected_at_append_time() -> None:
    rng = Random(33)
    chain = Blockchain()
    gw = generate_keypair(rng)
    dev = generate_keypair(rng)
    grow_block(chain, gw, gw)
    index = grow_block(chain, dev, gw, ttl_ms=500)
    header = chain.block(index).header
    info = make_info(dev, b"fresh enough", header.expires_at - 1)
    tx = build_transaction(chain, index, info, gw)
    # a fully counter-signed entry dated past the expiry must still bounce
    late_info = make_info(dev, b"too late", header.expires_at + 5)
    late = Transaction(
        prev_hash=tx.prev_hash,
        index=tx.index,
        gateway_sig=sign(gw.secret, late_info.encode()),
        gateway_key=gw.public,
        info=late_info,
    )
    assert (
        chain.append_transaction(index, late, tx_digest=late.digest)
        is Reject.EXPIRED_BLOCK
    )
    assert chain.append_transaction(index, tx, tx_digest=tx.digest) is None


# ---------------------------------------------------------------------------
# block append gates


def test_genesis_block_has_index_one_and_zero_link() -> None:
    rng = Random(34)
    chain = Blockchain()
    gw = generate_keypair(rng)
    grow_block(chain, gw, gw)
    header = chain.block(1).header
    assert header.index == 1
    assert header.prev_header_hash == ZERO_DIGEST


def test_fourth_block_links_to_third_header() -> None:
    rng = Random(35)
    chain, _, devs = build_chain(rng, blocks=3, txs_per_block=0)
    fourth = chain.block(4).header
    assert fourth.prev_header_hash == _sha(chain.block(3).header.encode())


def test_duplicate_owner_key_is_rejected() -> None:
    rng = Random(36)
    chain = Blockchain()
    gw = generate_keypair(rng)
    grow_block(chain, gw, gw)
    dup = BlockHeader(
        prev_header_hash=chain.tip_header_digest,
        index=2,
        created_at=BASE_MS,
        expires_at=BASE_MS + HOUR_MS,
        policy="default",
        owner_key=gw.public,
    )
    assert chain.append_block(dup, None, accept_all) is Reject.DUPLICATE_KEY


def test_stale_index_and_wrong_link_are_rejected() -> None:
    rng = Random(37)
    chain = Blockchain()
    gw = generate_keypair(rng)
    other = generate_keypair(rng)
    grow_block(chain, gw, gw)
    stale = BlockHeader(
        prev_header_hash=ZERO_DIGEST,
        index=1,
        created_at=BASE_MS,
        expires_at=BASE_MS + HOUR_MS,
        policy="default",
        owner_key=other.public,
    )
    assert chain.append_block(stale, None, accept_all) is Reject.BAD_INDEX
    wrong_link = dataclasses.replace(
        stale, index=2, prev_header_hash=sha256(b"fork")
    )
    assert (
        chain.append_block(wrong_link, None, accept_all)
        is Reject.BAD_PREV_HASH
    )


def test_nonpositive_lifetime_is_rejected() -> None:
    rng = Random(38)
    chain = Blockchain()
    gw = generate_keypair(rng)
    other = generate_keypair(rng)
    grow_block(chain, gw, gw)
    with pytest.raises(BadExpiryError):
        from appendchain.consensus import build_candidate

        build_candidate(chain, other.public, "default", 0, BASE_MS)
    flat = BlockHeader(
        prev_header_hash=chain.tip_header_digest,
        index=2,
        created_at=BASE_MS,
        expires_at=BASE_MS,
        policy="default",
        owner_key=other.public,
    )
    assert chain.append_block(flat, None, accept_all) is Reject.BAD_EXPIRY


def test_failed_quorum_check_blocks_the_append() -> None:
    rng = Random(39)
    chain = Blockchain()
    gw = generate_keypair(rng)
    other = generate_keypair(rng)
    grow_block(chain, gw, gw)
    header = BlockHeader(
        prev_header_hash=chain.tip_header_digest,
        index=2,
        created_at=BASE_MS,
        expires_at=BASE_MS + HOUR_MS,
        policy="default",
        owner_key=other.public,
    )
    assert (
        chain.append_block(header, None, lambda proof: False)
        is Reject.INSUFFICIENT_QUORUM
    )
    assert len(chain) == 1


def test_duplicate_key_rejected_before_quorum_is_consulted() -> None:
    rng = Random(57)
    chain = Blockchain()
    gw = generate_keypair(rng)
    grow_block(chain, gw, gw)
    dup = BlockHeader(
        prev_header_hash=chain.tip_header_digest,
        index=2,
        created_at=BASE_MS,
        expires_at=BASE_MS + HOUR_MS,
        policy="default",
        owner_key=gw.public,
    )
    consulted = []

    def probe(proof: object) -> bool:
        consulted.append(proof)
        return True

    assert chain.append_block(dup, None, probe) is Reject.DUPLICATE_KEY
    assert consulted == []


# ---------------------------------------------------------------------------
# lookup


def test_lookup_finds_inserted_keys_and_misses_unknown() -> None:
    rng = Random(40)
    chain, gws, devs = build_chain(rng, blocks=2, txs_per_block=1)
    assert chain.lookup(devs[0].public) == 2
    assert chain.lookup(devs[1].public) == 3
    assert chain.lookup(b"\x01" * 32) is None


def test_rotated_device_keeps_both_blocks_addressable() -> None:
    rng = Random(41)
    chain = Blockchain()
    gw = generate_keypair(rng)
    old = generate_keypair(rng)
    new = generate_keypair(rng)
    grow_block(chain, gw, gw)
    k1 = grow_block(chain, old, gw, tx_count=1)
    k2 = grow_block(chain, new, gw, tx_count=1)
    assert chain.lookup(old.public) == k1
    assert chain.lookup(new.public) == k2


# ---------------------------------------------------------------------------
# whole-chain verification


def test_fresh_chain_verifies_clean() -> None:
    rng = Random(42)
    chain, gws, _ = build_chain(rng, blocks=3, txs_per_block=10)
    members = frozenset(p.public for p in gws)
    assert verify_chain(chain) is None
    assert verify_chain(chain, members) is None


def test_flipped_data_byte_is_pinned_to_entry_and_reason() -> None:
    rng = Random(43)
    chain, gws, _ = build_chain(rng, blocks=2, txs_per_block=6)
    image = clone_via_encoding(chain)
    # block 3 is the second device block; corrupt entry 5's payload
    target_block, target_tx = 3, 5
    tx = decode_transaction(Reader(image[target_block - 1][1][target_tx - 1]))
    corrupted = dataclasses.replace(
        tx,
        info=dataclasses.replace(
            tx.info, data=bytes([tx.info.data[0] ^ 0x01]) + tx.info.data[1:]
        ),
    )
    image[target_block - 1][1][target_tx - 1] = corrupted.encode()
    violation = verify_chain(rebuild_unchecked(image))
    assert violation is not None
    assert (violation.block_index, violation.tx_index) == (
        target_block,
        target_tx,
    )
    assert violation.reason is Reject.BAD_DEVICE_SIG


def test_reordered_entries_break_the_hash_link_at_first_swap() -> None:
    rng = Random(44)
    chain, _, _ = build_chain(rng, blocks=1, txs_per_block=8)
    image = clone_via_encoding(chain)
    ledger = image[1][1]
    ledger[2], ledger[3] = ledger[3], ledger[2]
    violation = verify_chain(rebuild_unchecked(image))
    assert violation is not None
    assert (violation.block_index, violation.tx_index) == (2, 3)
    assert violation.reason is Reject.BAD_HASH_LINK


def test_duplicated_entry_is_flagged() -> None:
    rng = Random(45)
    chain, _, _ = build_chain(rng, blocks=1, txs_per_block=4)
    image = clone_via_encoding(chain)
    ledger = image[1][1]
    tx2 = decode_transaction(Reader(ledger[1]))
    tx4 = decode_transaction(Reader(ledger[3]))
    # keep link and index consistent so the content collision is what trips
    forged = dataclasses.replace(
        tx2, index=4, prev_hash=decode_transaction(Reader(ledger[2])).digest
    )
    ledger[3] = forged.encode()
    violation = verify_chain(rebuild_unchecked(image))
    assert violation is not None
    assert violation.reason in (Reject.DUPLICATE, Reject.BAD_GATEWAY_SIG)
    assert tx4.info != tx2.info


def test_membership_set_restricts_countersigners() -> None:
    rng = Random(46)
    chain, gws, _ = build_chain(rng, blocks=1, txs_per_block=2)
    assert verify_chain(chain) is None
    wrong_members = frozenset([generate_keypair(rng).public])
    violation = verify_chain(chain, wrong_members)
    assert violation is not None
    assert violation.reason is Reject.BAD_GATEWAY_SIG


def test_every_single_field_mutation_is_detected() -> None:
    rng = Random(47)
    chain, _, _ = build_chain(rng, blocks=3, txs_per_block=7)
    clean = rebuild_unchecked(clone_via_encoding(chain))
    assert verify_chain(clean) is None

    mutations = 0
    for block_pos, (header_bytes, tx_blobs) in enumerate(
        clone_via_encoding(chain)
    ):
        header = decode_header(Reader(header_bytes))
        for mutated in _header_mutants(header, rng):
            image = clone_via_encoding(chain)
            image[block_pos] = (mutated.encode(), image[block_pos][1])
            assert verify_chain(rebuild_unchecked(image)) is not None
            mutations += 1
        for tx_pos, blob in enumerate(tx_blobs):
            tx = decode_transaction(Reader(blob))
            for mutated_tx in _tx_mutants(tx, rng):
                image = clone_via_encoding(chain)
                image[block_pos][1][tx_pos] = mutated_tx.encode()
                assert verify_chain(rebuild_unchecked(image)) is not None
                mutations += 1
    assert mutations > 200


def _header_mutants(header: BlockHeader, rng: Random):
    yield dataclasses.replace(
        header, prev_header_hash=_flip(header.prev_header_hash, rng)
    )
    yield dataclasses.replace(header, index=header.index + 1)
    yield dataclasses.replace(header, created_at=header.created_at + 1)
    yield dataclasses.replace(header, expires_at=header.expires_at + 1)
    yield dataclasses.replace(header, policy=header.policy + "?")
    yield dataclasses.replace(header, owner_key=_flip(header.owner_key, rng))


def _tx_mutants(tx: Transaction, rng: Random):
    yield dataclasses.replace(tx, prev_hash=_flip(tx.prev_hash, rng))
    yield dataclasses.replace(tx, index=tx.index + 1)
    yield dataclasses.replace(tx, gateway_sig=_flip(tx.gateway_sig, rng))
    yield dataclasses.replace(tx, gateway_key=_flip(tx.gateway_key, rng))
    info = tx.info
    yield dataclasses.replace(
        tx, info=dataclasses.replace(info, device_sig=_flip(info.device_sig, rng))
    )
    yield dataclasses.replace(
        tx, info=dataclasses.replace(info, access_level=info.access_level + 1)
    )
    yield dataclasses.replace(
        tx, info=dataclasses.replace(info, gps=(1, 2) if info.gps is None else None)
    )
    yield dataclasses.replace(
        tx, info=dataclasses.replace(info, data=_flip(info.data, rng))
    )
    yield dataclasses.replace(
        tx, info=dataclasses.replace(info, produced_at=info.produced_at + 1)
    )


def _flip(raw: bytes, rng: Random) -> bytes:
    if not raw:
        return b"\x01"
    pos = rng.randrange(len(raw))
    return raw[:pos] + bytes([raw[pos] ^ 0x40]) + raw[pos + 1 :]


# ---------------------------------------------------------------------------
# iteration, digests, interning


def test_iter_transactions_walks_blocks_in_order() -> None:
    rng = Random(48)
    chain, _, _ = build_chain(rng, blocks=2, txs_per_block=3)
    walk = list(iter_transactions(chain))
    assert [b for b, _ in walk] == [2, 2, 2, 3, 3, 3]
    assert [tx.index for _, tx in walk] == [1, 2, 3, 1, 2, 3]


def test_chain_digest_tracks_content() -> None:
    rng = Random(49)
    chain_a, gws, _ = build_chain(rng, blocks=1, txs_per_block=2)
    chain_b, _, _ = build_chain(Random(49), blocks=1, txs_per_block=2)
    assert chain_a.chain_digest() == chain_b.chain_digest()
    dev = generate_keypair(rng)
    grow_block(chain_a, dev, gws[0], tx_count=1)
    assert chain_a.chain_digest() != chain_b.chain_digest()


def test_interning_reuses_decoded_transactions() -> None:
    rng = Random(50)
    chain, _, _ = build_chain(rng, blocks=1, txs_per_block=1)
    original = chain.block(2).ledger[0]
    raw = original.encode()
    register_transaction(original, encoded=raw)
    same, digest = intern_transaction(raw)
    assert same is original
    assert digest == _sha(raw)
    copy = decode_transaction(Reader(raw))
    interned, digest2 = intern_decoded(copy, raw)
    assert interned is original
    assert digest2 == digest


def test_block_accessors_are_one_based_and_bounded() -> None:
    rng = Random(51)
    chain, _, _ = build_chain(rng, blocks=1, txs_per_block=0)
    assert chain.block(1).header.index == 1
    assert len(chain) == 2
    header = chain.block(2).header
    assert chain.block_by_header(header.digest) == 2
    assert chain.block_by_header(sha256(b"unknown")) is None
