"""Append-only permissioned ledger for the gradient-trading federation.

The chain holds two kinds of blocks: an *init* block registering every
party (its starting points, sample commitment, and public keys) and
*operation* blocks committing DOWNLOAD requests, UPLOAD fulfilments, and
validator BAN decisions.  A single deterministic validator stands in for
consensus: it checks signatures, balance sufficiency and referential
integrity before a block is appended, and the whole block is rejected if
any transaction fails.

Points escrow: a DOWNLOAD is validated against the requester's free
balance (balance minus already-pending requests) and the amount is held
pending; the transfer itself happens when the matching UPLOAD commits.

Hash contract: SHA-256 throughout.  Merkle leaves are the serialized
transactions, hashed once before pairing; an odd level duplicates its
last node, and a single-leaf tree has root ``H(H(leaf))``.
"""

from __future__ import annotations

import copy
import enum
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .crypto import sha256, sign, verify

ZERO_HASH = bytes(32)

# Reserved creator id for the block validator, whose verification key is
# registered in the genesis block like any party's.
VALIDATOR_ID = (1 << 64) - 1

_LOG_MAGIC = b"FTCHAIN1"


class LedgerError(Exception):
    """A transaction or block failed validation; nothing was committed."""


class InvalidSignatureError(LedgerError):
    pass


class InsufficientBalanceError(LedgerError):
    pass


class DanglingUploadError(LedgerError):
    pass


class DuplicatePartyError(LedgerError):
    pass


class ChainParseError(LedgerError):
    """Raised while decoding a chain log; carries the failing block height."""

    def __init__(self, message: str, height: int):
        super().__init__(message)
        self.height = height


class TxKind(enum.IntEnum):
    INIT = 0
    DOWNLOAD = 1
    UPLOAD = 2
    BAN = 3
    FINE = 4  # recorded kind for the dispute mechanism; no dispute logic


class BlockKind(enum.IntEnum):
    INIT = 0
    OPERATION = 1


# ---------------------------------------------------------------------------
# Transaction bodies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InitBody:
    points: int
    sample_commitment: bytes  # 32-byte hash of the published sample batch
    verify_key: bytes  # 32 bytes
    wrap_key: bytes  # 32 bytes

    def to_bytes(self) -> bytes:
        return (
            struct.pack("<Q", self.points)
            + self.sample_commitment
            + self.verify_key
            + self.wrap_key
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "InitBody":
        if len(raw) != 8 + 96:
            raise ValueError("init body must be 104 bytes")
        (points,) = struct.unpack("<Q", raw[:8])
        return cls(points, raw[8:40], raw[40:72], raw[72:104])


@dataclass(frozen=True)
class DownloadBody:
    request_id: int
    target: int
    amount: int  # requested gradient count == points offered
    recipient_pk: bytes  # 32-byte wrap key for the onion's outer layer

    def to_bytes(self) -> bytes:
        return (
            struct.pack("<QQQ", self.request_id, self.target, self.amount)
            + self.recipient_pk
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "DownloadBody":
        if len(raw) != 24 + 32:
            raise ValueError("download body must be 56 bytes")
        request_id, target, amount = struct.unpack("<QQQ", raw[:24])
        return cls(request_id, target, amount, raw[24:])


@dataclass(frozen=True)
class UploadBody:
    request_id: int  # references the DOWNLOAD being fulfilled
    commitment: bytes  # 32-byte hash of the onion payload

    def to_bytes(self) -> bytes:
        return struct.pack("<Q", self.request_id) + self.commitment

    @classmethod
    def from_bytes(cls, raw: bytes) -> "UploadBody":
        if len(raw) != 40:
            raise ValueError("upload body must be 40 bytes")
        (request_id,) = struct.unpack("<Q", raw[:8])
        return cls(request_id, raw[8:])


@dataclass(frozen=True)
class BanBody:
    party: int
    round_id: int

    def to_bytes(self) -> bytes:
        return struct.pack("<Qq", self.party, self.round_id)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "BanBody":
        if len(raw) != 16:
            raise ValueError("ban body must be 16 bytes")
        party, round_id = struct.unpack("<Qq", raw)
        return cls(party, round_id)


@dataclass(frozen=True)
class FineBody:
    party: int
    amount: int

    def to_bytes(self) -> bytes:
        return struct.pack("<QQ", self.party, self.amount)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FineBody":
        if len(raw) != 16:
            raise ValueError("fine body must be 16 bytes")
        party, amount = struct.unpack("<QQ", raw)
        return cls(party, amount)


_BODY_TYPES = {
    TxKind.INIT: InitBody,
    TxKind.DOWNLOAD: DownloadBody,
    TxKind.UPLOAD: UploadBody,
    TxKind.BAN: BanBody,
    TxKind.FINE: FineBody,
}


@dataclass(frozen=True)
class Transaction:
    kind: TxKind
    creator: int
    body: object
    signature: bytes = b""

    def signing_bytes(self) -> bytes:
        body = self.body.to_bytes()
        return (
            struct.pack("<BQI", int(self.kind), self.creator, len(body)) + body
        )

    def to_bytes(self) -> bytes:
        return (
            self.signing_bytes()
            + struct.pack("<I", len(self.signature))
            + self.signature
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Transaction":
        if len(raw) < 13:
            raise ValueError("transaction too short")
        kind_value, creator, body_len = struct.unpack("<BQI", raw[:13])
        try:
            kind = TxKind(kind_value)
        except ValueError as exc:
            raise ValueError(f"unknown transaction kind {kind_value}") from exc
        offset = 13
        if len(raw) < offset + body_len + 4:
            raise ValueError("transaction body truncated")
        body = _BODY_TYPES[kind].from_bytes(raw[offset : offset + body_len])
        offset += body_len
        (sig_len,) = struct.unpack("<I", raw[offset : offset + 4])
        offset += 4
        if len(raw) != offset + sig_len:
            raise ValueError("transaction signature length mismatch")
        return cls(kind, creator, body, raw[offset:])


def signed_transaction(
    kind: TxKind, creator: int, body: object, signing_key: bytes
) -> Transaction:
    tx = Transaction(kind, creator, body)
    return Transaction(kind, creator, body, sign(tx.signing_bytes(), signing_key))


# ---------------------------------------------------------------------------
# Merkle tree and blocks
# ---------------------------------------------------------------------------


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    """Binary Merkle root over once-hashed leaves; odd levels duplicate."""
    if not leaves:
        raise ValueError("merkle tree needs at least one leaf")
    level = [sha256(leaf) for leaf in leaves]
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return sha256(level[0]) if len(leaves) == 1 else level[0]


@dataclass(frozen=True)
class Block:
    kind: BlockKind
    height: int
    prev_hash: bytes
    merkle_root: bytes
    transactions: Tuple[Transaction, ...]
    hash: bytes = b""

    def header_bytes(self) -> bytes:
        return (
            struct.pack("<BQ", int(self.kind), self.height)
            + self.prev_hash
            + self.merkle_root
        )

    def compute_hash(self) -> bytes:
        return sha256(self.header_bytes())

    def to_bytes(self) -> bytes:
        parts = [self.header_bytes(), self.hash, struct.pack("<I", len(self.transactions))]
        for tx in self.transactions:
            raw = tx.to_bytes()
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Block":
        if len(raw) < 9 + 64 + 32 + 4:
            raise ValueError("block record too short")
        kind_value, height = struct.unpack("<BQ", raw[:9])
        try:
            kind = BlockKind(kind_value)
        except ValueError as exc:
            raise ValueError(f"unknown block kind {kind_value}") from exc
        prev_hash = raw[9:41]
        root = raw[41:73]
        block_hash = raw[73:105]
        (ntx,) = struct.unpack("<I", raw[105:109])
        offset = 109
        txs = []
        for _ in range(ntx):
            if len(raw) < offset + 4:
                raise ValueError("transaction count overruns block record")
            (tx_len,) = struct.unpack("<I", raw[offset : offset + 4])
            offset += 4
            if len(raw) < offset + tx_len:
                raise ValueError("transaction record truncated")
            txs.append(Transaction.from_bytes(raw[offset : offset + tx_len]))
            offset += tx_len
        if offset != len(raw):
            raise ValueError("trailing bytes after last transaction")
        return cls(kind, height, prev_hash, root, tuple(txs), block_hash)


def seal_block(
    kind: BlockKind,
    height: int,
    prev_hash: bytes,
    transactions: Sequence[Transaction],
) -> Block:
    root = merkle_root([tx.to_bytes() for tx in transactions])
    block = Block(kind, height, prev_hash, root, tuple(transactions))
    return Block(kind, height, prev_hash, root, tuple(transactions), block.compute_hash())


# ---------------------------------------------------------------------------
# Replayable ledger state
# ---------------------------------------------------------------------------


@dataclass
class LedgerState:
    """Everything derivable by replaying committed transactions."""

    registered_keys: Dict[int, Tuple[bytes, bytes]] = field(default_factory=dict)
    balances: Dict[int, int] = field(default_factory=dict)
    pending: Dict[int, int] = field(default_factory=dict)
    banned: Set[int] = field(default_factory=set)
    downloads: Dict[int, DownloadBody] = field(default_factory=dict)
    download_creator: Dict[int, int] = field(default_factory=dict)
    uploaded: Set[int] = field(default_factory=set)

    def copy(self) -> "LedgerState":
        return copy.deepcopy(self)

    def free_balance(self, party: int) -> int:
        return self.balances.get(party, 0) - self.pending.get(party, 0)

    def apply(self, tx: Transaction, block_kind: BlockKind) -> None:
        if tx.kind is TxKind.INIT:
            self._apply_init(tx, block_kind)
            return
        if block_kind is not BlockKind.OPERATION:
            raise LedgerError("init blocks may only carry INIT transactions")
        keys = self.registered_keys.get(tx.creator)
        if keys is None:
            raise InvalidSignatureError(f"creator {tx.creator} is not registered")
        if not verify(tx.signing_bytes(), tx.signature, keys[0]):
            raise InvalidSignatureError(f"bad signature from {tx.creator}")
        if tx.kind is TxKind.DOWNLOAD:
            self._apply_download(tx)
        elif tx.kind is TxKind.UPLOAD:
            self._apply_upload(tx)
        elif tx.kind is TxKind.BAN:
            self._apply_ban(tx)
        else:
            raise LedgerError(f"{tx.kind.name} transactions are not accepted")

    def _apply_init(self, tx: Transaction, block_kind: BlockKind) -> None:
        if block_kind is not BlockKind.INIT:
            raise LedgerError("INIT transaction outside an init block")
        body: InitBody = tx.body
        if tx.creator in self.registered_keys:
            raise DuplicatePartyError(f"party {tx.creator} already registered")
        # Key registration is bootstrapped: the init transaction is
        # self-signed under the key it registers.
        if not verify(tx.signing_bytes(), tx.signature, body.verify_key):
            raise InvalidSignatureError(f"init for {tx.creator} not self-signed")
        self.registered_keys[tx.creator] = (body.verify_key, body.wrap_key)
        self.balances[tx.creator] = body.points

    def _apply_download(self, tx: Transaction) -> None:
        body: DownloadBody = tx.body
        if tx.creator in self.banned:
            raise LedgerError(f"banned party {tx.creator} cannot download")
        if body.target not in self.registered_keys or body.target == tx.creator:
            raise LedgerError(f"download targets invalid party {body.target}")
        if body.target in self.banned:
            raise LedgerError(f"download targets banned party {body.target}")
        if body.request_id in self.downloads:
            raise LedgerError(f"request id {body.request_id} already used")
        if self.free_balance(tx.creator) < body.amount:
            raise InsufficientBalanceError(
                f"party {tx.creator} has {self.free_balance(tx.creator)} free "
                f"points, requested {body.amount}"
            )
        self.downloads[body.request_id] = body
        self.download_creator[body.request_id] = tx.creator
        self.pending[tx.creator] = self.pending.get(tx.creator, 0) + body.amount

    def _apply_upload(self, tx: Transaction) -> None:
        body: UploadBody = tx.body
        download = self.downloads.get(body.request_id)
        if download is None:
            raise DanglingUploadError(
                f"upload references unknown request {body.request_id}"
            )
        if body.request_id in self.uploaded:
            raise DanglingUploadError(
                f"request {body.request_id} already fulfilled"
            )
        if tx.creator != download.target:
            raise LedgerError(
                f"upload for request {body.request_id} must come from "
                f"party {download.target}"
            )
        requester = self.download_creator[body.request_id]
        amount = download.amount
        if self.balances.get(requester, 0) < amount:
            raise InsufficientBalanceError(
                f"escrow violated for request {body.request_id}"
            )
        self.uploaded.add(body.request_id)
        self.pending[requester] -= amount
        self.balances[requester] -= amount
        self.balances[tx.creator] = self.balances.get(tx.creator, 0) + amount

    def _apply_ban(self, tx: Transaction) -> None:
        body: BanBody = tx.body
        if tx.creator != VALIDATOR_ID:
            raise LedgerError("only the validator commits ban decisions")
        if body.party not in self.registered_keys or body.party == VALIDATOR_ID:
            raise LedgerError(f"cannot ban unknown party {body.party}")
        if body.party in self.banned:
            raise LedgerError(f"party {body.party} is already banned")
        self.banned.add(body.party)


# ---------------------------------------------------------------------------
# Chain
# ---------------------------------------------------------------------------


class Chain:
    """Single-writer append-only chain with a live state mirror."""

    def __init__(self) -> None:
        self.blocks: List[Block] = []
        self.state = LedgerState()

    # -- read API ----------------------------------------------------------

    @property
    def height(self) -> int:
        return len(self.blocks)

    @property
    def balances(self) -> Dict[int, int]:
        return dict(self.state.balances)

    @property
    def registered_keys(self) -> Dict[int, Tuple[bytes, bytes]]:
        return dict(self.state.registered_keys)

    @property
    def banned(self) -> Set[int]:
        return set(self.state.banned)

    def circulating_total(self) -> int:
        """Points held by alive parties (frozen banned balances excluded)."""
        return sum(
            bal
            for pid, bal in self.state.balances.items()
            if pid not in self.state.banned
        )

    def frozen_total(self) -> int:
        return sum(self.state.balances.get(pid, 0) for pid in self.state.banned)

    # -- write API ---------------------------------------------------------

    def append_block(
        self, transactions: Sequence[Transaction], kind: Optional[BlockKind] = None
    ) -> Block:
        """Validate and append; rejects atomically on any bad transaction."""
        if not transactions:
            raise LedgerError("a block needs at least one transaction")
        if kind is None:
            kind = BlockKind.INIT if not self.blocks else BlockKind.OPERATION
        if kind is BlockKind.INIT and self.blocks:
            raise LedgerError("init blocks after genesis are not supported")
        if kind is BlockKind.OPERATION and not self.blocks:
            raise LedgerError("the genesis block must be an init block")
        staged = self.state.copy()
        for tx in transactions:
            staged.apply(tx, kind)
        prev_hash = self.blocks[-1].hash if self.blocks else ZERO_HASH
        block = seal_block(kind, len(self.blocks), prev_hash, transactions)
        self.blocks.append(block)
        self.state = staged
        return block

    def truncate(self, height: int) -> None:
        """Drop uncommitted-round blocks and rebuild state (round rollback)."""
        if height > len(self.blocks):
            raise ValueError("cannot truncate forward")
        blocks = self.blocks[:height]
        rebuilt = Chain()
        for block in blocks:
            rebuilt.append_block(block.transactions, block.kind)
        self.blocks = rebuilt.blocks
        self.state = rebuilt.state

    # -- serialization -----------------------------------------------------

    def to_log_bytes(self) -> bytes:
        parts = [_LOG_MAGIC]
        for block in self.blocks:
            raw = block.to_bytes()
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
        return b"".join(parts)

    def write_log(self, path) -> None:
        from pathlib import Path

        target = Path(path)
        tmp = target.with_suffix(target.suffix + ".tmp")
        tmp.write_bytes(self.to_log_bytes())
        tmp.replace(target)

    @staticmethod
    def parse_log_bytes(raw: bytes) -> List[Block]:
        if raw[: len(_LOG_MAGIC)] != _LOG_MAGIC:
            raise ChainParseError("bad chain log magic", height=0)
        offset = len(_LOG_MAGIC)
        blocks: List[Block] = []
        while offset < len(raw):
            height = len(blocks)
            if len(raw) < offset + 4:
                raise ChainParseError("dangling block length prefix", height)
            (block_len,) = struct.unpack("<I", raw[offset : offset + 4])
            offset += 4
            if len(raw) < offset + block_len:
                raise ChainParseError("block record truncated", height)
            try:
                blocks.append(Block.from_bytes(raw[offset : offset + block_len]))
            except ValueError as exc:
                raise ChainParseError(str(exc), height) from exc
            offset += block_len
        return blocks


def make_genesis(entries: Sequence[Tuple[int, InitBody, bytes]]) -> Chain:
    """Build a chain whose genesis block registers every entry.

    Each entry is ``(party_id, init_body, signing_key)``; the body's
    verify key must pair with the signing key.  Raises on duplicate ids.
    """
    if len(entries) < 2:
        raise LedgerError("a federation needs at least 2 registered parties")
    seen = set()
    for party_id, _, _ in entries:
        if party_id in seen:
            raise DuplicatePartyError(f"party {party_id} listed twice")
        seen.add(party_id)
    txs = [
        signed_transaction(TxKind.INIT, party_id, body, signing_key)
        for party_id, body, signing_key in entries
    ]
    chain = Chain()
    chain.append_block(txs, BlockKind.INIT)
    return chain


def verify_chain(blocks: Sequence[Block]) -> Tuple[bool, Optional[int]]:
    """Replay every structural and semantic rule from genesis.

    Returns ``(True, None)`` for a clean chain, otherwise ``(False, h)``
    with ``h`` the first failing height.
    """
    state = LedgerState()
    prev_hash = ZERO_HASH
    for expected_height, block in enumerate(blocks):
        ok = (
            block.height == expected_height
            and block.prev_hash == prev_hash
            and block.hash == block.compute_hash()
        )
        if ok:
            try:
                root = merkle_root([tx.to_bytes() for tx in block.transactions])
            except ValueError:
                ok = False
            else:
                ok = root == block.merkle_root
        if ok and expected_height == 0 and block.kind is not BlockKind.INIT:
            ok = False
        if ok and expected_height > 0 and block.kind is BlockKind.INIT:
            ok = False
        if ok:
            try:
                for tx in block.transactions:
                    state.apply(tx, block.kind)
            except LedgerError:
                ok = False
        if not ok:
            return False, expected_height
        prev_hash = block.hash
    return True, None


def verify_chain_log(path) -> Tuple[bool, Optional[int]]:
    """Parse and verify an exported chain log; parse errors count as failures."""
    from pathlib import Path

    raw = Path(path).read_bytes()
    try:
        blocks = Chain.parse_log_bytes(raw)
    except ChainParseError as exc:
        return False, exc.height
    return verify_chain(blocks)
