"""Append-only journal of chain events, one record per insertion.

Record layout: ``type byte || 4-byte big-endian length || canonical body``
where type 0x01 is a block header and 0x02 a transaction.  Replaying a
journal routes each transaction to its block through the hash links alone,
so a journal is self-contained evidence of a replica's history and can be
re-validated offline.
"""

from __future__ import annotations

import logging
import os
from typing import Optional

from . import codec
from .chain import (
    Blockchain,
    BlockHeader,
    Transaction,
    Violation,
    decode_header,
    decode_transaction,
    verify_chain,
)
from .codec import DecodeError, Reader

logger = logging.getLogger(__name__)


class JournalError(Exception):
    """A journal file could not be read back into a consistent chain."""


class JournalWriter:
    """Appends canonical records to a journal file as events happen."""

    def __init__(self, path: str, *, append: bool = True):
        self.path = path
        self._fh = open(path, "ab" if append else "wb")

    def write_header(self, header: BlockHeader) -> None:
        self._write(codec.JOURNAL_HEADER, header.encode())

    def write_transaction(self, tx: Transaction) -> None:
        self._write(codec.JOURNAL_TRANSACTION, tx.encode())

    def _write(self, record_type: int, body: bytes) -> None:
        self._fh.write(
            codec.pack_u8(record_type) + codec.pack_u32(len(body)) + body
        )

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "JournalWriter":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def iter_records(path: str):
    """Yield ``(record_type, body_bytes)`` pairs; raises
    :class:`JournalError` on truncation or garbage."""
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        offset = 0
        while offset < size:
            head = fh.read(5)
            if len(head) < 5:
                raise JournalError(
                    f"truncated record header at offset {offset}"
                )
            record_type = head[0]
            length = int.from_bytes(head[1:5], "big")
            body = fh.read(length)
            if len(body) < length:
                raise JournalError(f"truncated record body at offset {offset}")
            yield record_type, body
            offset += 5 + length


def replay_journal(path: str) -> Blockchain:
    """Rebuild a chain from a journal.

    Transactions are routed to the unique block whose current tip digest
    matches their back link; headers extend the chain in order.  Validation
    is structural only — run :func:`~appendchain.chain.verify_chain` on the
    result for the full re-check.
    """
    chain = Blockchain()
    tip_to_block: dict[bytes, int] = {}
    for number, (record_type, body) in enumerate(iter_records(path), start=1):
        try:
            reader = Reader(body)
            if record_type == codec.JOURNAL_HEADER:
                header = decode_header(reader)
                reader.expect_end()
                reject = chain.append_block(header, None, lambda _: True)
                if reject is not None:
                    raise JournalError(
                        f"record {number}: header rejected ({reject})"
                    )
                tip_to_block[header.digest] = header.index
            elif record_type == codec.JOURNAL_TRANSACTION:
                tx = decode_transaction(reader)
                reader.expect_end()
                block_index = tip_to_block.get(tx.prev_hash)
                if block_index is None:
                    raise JournalError(
                        f"record {number}: transaction links to no known tip"
                    )
                del tip_to_block[tx.prev_hash]
                reject = chain.append_transaction(block_index, tx)
                if reject is not None:
                    raise JournalError(
                        f"record {number}: transaction rejected ({reject})"
                    )
                tip_to_block[tx.digest] = block_index
            else:
                raise JournalError(
                    f"record {number}: unknown record type 0x{record_type:02x}"
                )
        except DecodeError as exc:
            raise JournalError(f"record {number}: {exc}") from exc
    return chain


def verify_journal(
    path: str, gateway_keys: Optional[frozenset[bytes]] = None
) -> tuple[Blockchain, Optional[Violation]]:
    """Replay ``path`` and fully re-validate the resulting chain."""
    chain = replay_journal(path)
    return chain, verify_chain(chain, gateway_keys)
