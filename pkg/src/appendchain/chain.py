"""Appendable-block chain: one block per device identity, growing ledgers.

A block is inserted once (by consensus) and its ledger keeps growing
afterwards, so the usual "seal the block, then link the next one" rule is
replaced by two hash chains:

* headers link to the previous header (the first header links to a 32-byte
  zero digest), and
* ledger entries link to the previous entry of the *same* block, with the
  first entry linking back to its own block header.

Appending to one block therefore never invalidates any other block, which is
what lets every device write into its own block concurrently.

All validation gates return a :class:`Reject` member instead of raising;
build-side helpers raise, because a failed build is a programming or policy
error at the caller.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Callable, Iterable, Optional
from weakref import WeakKeyDictionary, WeakValueDictionary

from . import codec, crypto
from .codec import Reader
from .crypto import ZERO_DIGEST, sha256

logger = logging.getLogger(__name__)

PublicKey = bytes
Signature = bytes
Digest = bytes

DEFAULT_POLICY = "default"


class Reject(Enum):
    """Why an append, a chain check or a device request was refused."""

    # transaction-level
    BAD_HASH_LINK = "BadHashLink"
    BAD_INDEX = "BadIndex"
    BAD_DEVICE_SIG = "BadDeviceSig"
    BAD_GATEWAY_SIG = "BadGatewaySig"
    EXPIRED_BLOCK = "ExpiredBlock"
    DUPLICATE = "Duplicate"
    UNKNOWN_BLOCK = "UnknownBlock"
    # block-level
    BAD_PREV_HASH = "BadPrevHash"
    DUPLICATE_KEY = "DuplicateKey"
    BAD_EXPIRY = "BadExpiry"
    INSUFFICIENT_QUORUM = "InsufficientQuorum"
    # gateway-facing
    UNKNOWN_KEY = "UnknownKey"
    INVALID_NEW_KEY = "InvalidNewKey"
    KEY_UPDATE_TIMEOUT = "KeyUpdateTimeout"
    CONSENSUS_TIMEOUT = "ConsensusTimeout"

    def __str__(self) -> str:
        return self.value


class ChainError(Exception):
    """Base class for build-side chain failures."""


class ExpiredBlockError(ChainError):
    """The target block's lifetime is over; a key update is required."""


class DuplicateKeyError(ChainError):
    """A block for this owner key already exists."""


class BadExpiryError(ChainError):
    """A block lifetime must be strictly positive."""


@dataclass(frozen=True)
class BlockHeader:
    """Immutable part of a block, fixed at consensus time."""

    prev_header_hash: Digest
    index: int
    created_at: int
    expires_at: int
    policy: str
    owner_key: PublicKey

    def encode(self) -> bytes:
        return b"".join(
            (
                codec.pack_digest(self.prev_header_hash),
                codec.pack_u64(self.index),
                codec.pack_u64(self.created_at),
                codec.pack_u64(self.expires_at),
                codec.pack_text(self.policy),
                codec.pack_bytes(self.owner_key),
            )
        )

    @cached_property
    def digest(self) -> Digest:
        return sha256(self.encode())


@dataclass(frozen=True)
class DeviceInfo:
    """Device-produced record: payload plus the device's own signature."""

    device_sig: Signature
    access_level: int
    gps: Optional[tuple[int, int]]  # (lat, lon) in signed micro-degrees
    data: bytes
    produced_at: int

    def signed_payload(self) -> bytes:
        """The byte string the device signature covers (everything but the
        signature itself)."""
        return b"".join(
            (
                codec.pack_u64(self.access_level),
                codec.pack_optional_coords(self.gps),
                codec.pack_bytes(self.data),
                codec.pack_u64(self.produced_at),
            )
        )

    def encode(self) -> bytes:
        return codec.pack_bytes(self.device_sig) + self.signed_payload()


@dataclass(frozen=True)
class Transaction:
    """A ledger entry: device info wrapped and countersigned by a gateway."""

    prev_hash: Digest
    index: int
    gateway_sig: Signature
    gateway_key: PublicKey
    info: DeviceInfo

    def encode(self) -> bytes:
        return b"".join(
            (
                codec.pack_digest(self.prev_hash),
                codec.pack_u64(self.index),
                codec.pack_bytes(self.gateway_sig),
                codec.pack_bytes(self.gateway_key),
                self.info.encode(),
            )
        )

    @cached_property
    def digest(self) -> Digest:
        return sha256(self.encode())


def decode_header(reader: Reader) -> BlockHeader:
    return BlockHeader(
        prev_header_hash=reader.read_digest(),
        index=reader.read_u64(),
        created_at=reader.read_u64(),
        expires_at=reader.read_u64(),
        policy=reader.read_text(),
        owner_key=reader.read_bytes(),
    )


def decode_info(reader: Reader) -> DeviceInfo:
    return DeviceInfo(
        device_sig=reader.read_bytes(),
        access_level=reader.read_u64(),
        gps=reader.read_optional_coords(),
        data=reader.read_bytes(),
        produced_at=reader.read_u64(),
    )


def decode_transaction(reader: Reader) -> Transaction:
    return Transaction(
        prev_hash=reader.read_digest(),
        index=reader.read_u64(),
        gateway_sig=reader.read_bytes(),
        gateway_key=reader.read_bytes(),
        info=decode_info(reader),
    )


# Signature checks are pure functions of immutable objects, so their outcome
# is cached per object (keyed by the verifying key).  Replicas in one process
# share interned transaction objects, which turns the N-replica re-check of
# the same signature into a dictionary hit.  Tampered bytes always decode to
# a distinct object and take the full verification path.
_INFO_VERIFIED: "WeakKeyDictionary[DeviceInfo, bytes]" = WeakKeyDictionary()
_TX_VERIFIED: "WeakKeyDictionary[Transaction, bytes]" = WeakKeyDictionary()


def device_sig_valid(info: DeviceInfo, owner_key: PublicKey) -> bool:
    if _INFO_VERIFIED.get(info) == owner_key:
        return True
    ok = crypto.verify(owner_key, info.signed_payload(), info.device_sig)
    if ok:
        _INFO_VERIFIED[info] = owner_key
    return ok


def gateway_sig_valid(tx: Transaction) -> bool:
    if _TX_VERIFIED.get(tx) == tx.gateway_key:
        return True
    ok = crypto.verify(tx.gateway_key, tx.info.encode(), tx.gateway_sig)
    if ok:
        _TX_VERIFIED[tx] = tx.gateway_key
    return ok


# Decoded transactions are interned by content digest so that all replicas in
# one process share a single immutable object per transaction.
_TX_INTERN: "WeakValueDictionary[bytes, Transaction]" = WeakValueDictionary()


def intern_transaction(raw: bytes) -> tuple[Transaction, Digest]:
    """Decode ``raw`` (a full canonical transaction) to a shared instance.

    Returns the transaction and its content digest.  Raises
    :class:`~appendchain.codec.DecodeError` on malformed input.
    """
    digest = sha256(raw)
    tx = _TX_INTERN.get(digest)
    if tx is None:
        reader = Reader(raw)
        tx = decode_transaction(reader)
        reader.expect_end()
        tx.__dict__["digest"] = digest  # pre-seed the cached property
        _TX_INTERN[digest] = tx
    return tx, digest


def register_transaction(
    tx: Transaction, *, encoded: Optional[bytes] = None
) -> Digest:
    """Intern a locally built transaction and return its digest.

    ``encoded`` may carry ``tx.encode()`` if the caller already produced it,
    sparing a second serialization for the digest.
    """
    if encoded is not None and "digest" not in tx.__dict__:
        tx.__dict__["digest"] = sha256(encoded)
    digest = tx.digest
    _TX_INTERN.setdefault(digest, tx)
    return digest


def intern_decoded(
    tx: Transaction, encoded: Optional[bytes] = None
) -> tuple[Transaction, Digest]:
    """Swap an already-decoded transaction for the shared canonical instance.

    Replicas that receive the same transaction bytes end up holding one
    object, so signature checks cached on it are shared too.
    """
    if encoded is None:
        encoded = tx.encode()
    digest = sha256(encoded)
    existing = _TX_INTERN.get(digest)
    if existing is not None:
        return existing, digest
    tx.__dict__["digest"] = digest
    _TX_INTERN[digest] = tx
    return tx, digest


def _dup_key(device_sig: bytes, produced_at: int) -> int:
    # compact 64-bit fingerprint; hits are confirmed by scanning the ledger
    return int.from_bytes(
        sha256(device_sig + produced_at.to_bytes(8, "big"))[:8], "big"
    )


class Block:
    """A header plus its growing ledger of transactions."""

    __slots__ = ("header", "ledger", "tip_digest", "_dup_index")

    def __init__(self, header: BlockHeader):
        self.header = header
        self.ledger: list[Transaction] = []
        self.tip_digest: Digest = header.digest
        self._dup_index: set[int] = set()

    def has_duplicate(self, info: DeviceInfo) -> bool:
        if _dup_key(info.device_sig, info.produced_at) not in self._dup_index:
            return False
        return any(
            t.info.device_sig == info.device_sig
            and t.info.produced_at == info.produced_at
            for t in self.ledger
        )

    def _apply(self, tx: Transaction, tx_digest: Digest) -> None:
        self.ledger.append(tx)
        self.tip_digest = tx_digest
        self._dup_index.add(_dup_key(tx.info.device_sig, tx.info.produced_at))


@dataclass(frozen=True)
class Violation:
    """First invariant breach found by :func:`verify_chain`.

    ``tx_index`` is 0 for a header-level problem, otherwise the 1-based
    position of the offending ledger entry.
    """

    block_index: int
    tx_index: int
    reason: Reject


class Blockchain:
    """In-memory replica: ordered blocks plus owner-key and header indexes."""

    __slots__ = ("blocks", "key_index", "header_index")

    def __init__(self) -> None:
        self.blocks: list[Block] = []
        self.key_index: dict[PublicKey, int] = {}
        self.header_index: dict[Digest, int] = {}

    def __len__(self) -> int:
        return len(self.blocks)

    def block(self, index: int) -> Block:
        """Block at 1-based ``index``."""
        return self.blocks[index - 1]

    def lookup(self, owner_key: PublicKey) -> Optional[int]:
        """1-based index of the block owned by ``owner_key``, if any."""
        return self.key_index.get(owner_key)

    def block_by_header(self, header_digest: Digest) -> Optional[int]:
        return self.header_index.get(header_digest)

    @property
    def tip_header_digest(self) -> Digest:
        return self.blocks[-1].header.digest if self.blocks else ZERO_DIGEST

    def append_block(
        self,
        header: BlockHeader,
        proof: object,
        quorum_check: Callable[[object], bool],
    ) -> Optional[Reject]:
        """Insert a new block if ``header`` extends the chain and ``proof``
        satisfies ``quorum_check``.  Returns ``None`` on success."""
        if header.index != len(self.blocks) + 1:
            return Reject.BAD_INDEX
        if header.prev_header_hash != self.tip_header_digest:
            return Reject.BAD_PREV_HASH
        if header.owner_key in self.key_index:
            return Reject.DUPLICATE_KEY
        if header.expires_at <= header.created_at:
            return Reject.BAD_EXPIRY
        if not quorum_check(proof):
            return Reject.INSUFFICIENT_QUORUM
        self.blocks.append(Block(header))
        self.key_index[header.owner_key] = header.index
        self.header_index[header.digest] = header.index
        return None

    def append_transaction(
        self,
        block_index: int,
        tx: Transaction,
        *,
        gateway_keys: Optional[frozenset[PublicKey]] = None,
        tx_digest: Optional[Digest] = None,
    ) -> Optional[Reject]:
        """Append ``tx`` to the ledger of block ``block_index``.

        ``gateway_keys``, when given, restricts countersigners to that
        membership set (each of which must also own a block in the chain).
        ``tx_digest`` may carry a precomputed content digest.
        Returns ``None`` on success, otherwise the first failing gate.
        """
        if not 1 <= block_index <= len(self.blocks):
            return Reject.UNKNOWN_BLOCK
        block = self.blocks[block_index - 1]
        if block.has_duplicate(tx.info):
            return Reject.DUPLICATE
        if tx.index != len(block.ledger) + 1:
            return Reject.BAD_INDEX
        if tx.prev_hash != block.tip_digest:
            return Reject.BAD_HASH_LINK
        if not device_sig_valid(tx.info, block.header.owner_key):
            return Reject.BAD_DEVICE_SIG
        if tx.gateway_key not in self.key_index:
            return Reject.BAD_GATEWAY_SIG
        if gateway_keys is not None and tx.gateway_key not in gateway_keys:
            return Reject.BAD_GATEWAY_SIG
        if not gateway_sig_valid(tx):
            return Reject.BAD_GATEWAY_SIG
        if tx.info.produced_at >= block.header.expires_at:
            return Reject.EXPIRED_BLOCK
        block._apply(tx, tx_digest if tx_digest is not None else tx.digest)
        return None

    def chain_digest(self) -> Digest:
        """Digest of the full canonical encoding of every block and ledger
        entry, in order.  Two replicas are identical iff this matches."""
        hasher = hashlib.sha256()
        for block in self.blocks:
            enc = block.header.encode()
            hasher.update(codec.pack_u32(len(enc)))
            hasher.update(enc)
            hasher.update(codec.pack_u32(len(block.ledger)))
            for tx in block.ledger:
                enc = tx.encode()
                hasher.update(codec.pack_u32(len(enc)))
                hasher.update(enc)
        return hasher.digest()


def build_transaction(
    chain: Blockchain,
    block_index: int,
    info: DeviceInfo,
    gateway_pair: crypto.KeyPair,
) -> Transaction:
    """Wrap ``info`` as the next ledger entry of block ``block_index``,
    countersigned by the gateway.

    The caller is expected to have verified ``info.device_sig`` already.
    Raises :class:`ExpiredBlockError` when the block's lifetime is over,
    which is the signal to run the key-update path instead.
    """
    block = chain.block(block_index)
    if info.produced_at >= block.header.expires_at:
        raise ExpiredBlockError(
            f"block {block_index} expired at {block.header.expires_at}, "
            f"info produced at {info.produced_at}"
        )
    tx = Transaction(
        prev_hash=block.tip_digest,
        index=len(block.ledger) + 1,
        gateway_sig=crypto.sign(gateway_pair.secret, info.encode()),
        gateway_key=gateway_pair.public,
        info=info,
    )
    # A signature we just produced is valid by construction.
    _TX_VERIFIED[tx] = tx.gateway_key
    return tx


def verify_chain(
    chain: Blockchain,
    gateway_keys: Optional[frozenset[PublicKey]] = None,
) -> Optional[Violation]:
    """Re-validate every structural and cryptographic invariant.

    Returns ``None`` for a sound chain, otherwise the first violation in
    block order (headers before their ledgers, ledger entries in order).
    ``gateway_keys`` enables the countersigner membership check.
    """
    prev_digest = ZERO_DIGEST
    seen_owners: set[PublicKey] = set()
    for k, block in enumerate(chain.blocks, start=1):
        header = block.header
        if header.prev_header_hash != prev_digest:
            return Violation(k, 0, Reject.BAD_PREV_HASH)
        if header.index != k:
            return Violation(k, 0, Reject.BAD_INDEX)
        if header.expires_at <= header.created_at:
            return Violation(k, 0, Reject.BAD_EXPIRY)
        if header.owner_key in seen_owners:
            return Violation(k, 0, Reject.DUPLICATE_KEY)
        seen_owners.add(header.owner_key)
        if chain.key_index.get(header.owner_key) != k:
            return Violation(k, 0, Reject.BAD_INDEX)

        tip = header.digest
        seen_entries: set[tuple[bytes, int]] = set()
        for m, tx in enumerate(block.ledger, start=1):
            if tx.prev_hash != tip:
                return Violation(k, m, Reject.BAD_HASH_LINK)
            if tx.index != m:
                return Violation(k, m, Reject.BAD_INDEX)
            if not device_sig_valid(tx.info, header.owner_key):
                return Violation(k, m, Reject.BAD_DEVICE_SIG)
            if gateway_keys is not None and tx.gateway_key not in gateway_keys:
                return Violation(k, m, Reject.BAD_GATEWAY_SIG)
            if tx.gateway_key not in chain.key_index:
                return Violation(k, m, Reject.BAD_GATEWAY_SIG)
            if not gateway_sig_valid(tx):
                return Violation(k, m, Reject.BAD_GATEWAY_SIG)
            if tx.info.produced_at >= header.expires_at:
                return Violation(k, m, Reject.EXPIRED_BLOCK)
            entry = (tx.info.device_sig, tx.info.produced_at)
            if entry in seen_entries:
                return Violation(k, m, Reject.DUPLICATE)
            seen_entries.add(entry)
            tip = tx.digest
        prev_digest = header.digest
    return None


def iter_transactions(chain: Blockchain) -> Iterable[tuple[int, Transaction]]:
    """All ledger entries as ``(block_index, transaction)`` in chain order."""
    for k, block in enumerate(chain.blocks, start=1):
        for tx in block.ledger:
            yield k, tx
