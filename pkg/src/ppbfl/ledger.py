"""Transactions, Merkle trees, blocks and chain validation."""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

from .cas import Cid
from .errors import InvalidTransaction, MalformedChain, MalformedSignature
from .ringsig import RingSignature, ring_verify

ZERO_HASH = bytes(32)
EMPTY_ROOT = hashlib.sha256(b"").digest()


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def tx_message(round_no: int, cids: Sequence[Cid]) -> bytes:
    """Bytes covered by a transaction's ring signature: round and CID list."""
    return struct.pack("<QI", round_no, len(cids)) + b"".join(c.digest for c in cids)


@dataclass(frozen=True)
class Transaction:
    round: int
    cids: tuple[Cid, ...]
    ring_sig: RingSignature
    tx_id: bytes = field(default=b"")

    def __post_init__(self):
        object.__setattr__(self, "cids", tuple(self.cids))
        if not self.cids:
            raise ValueError("a transaction carries at least one cid")
        if not self.tx_id:
            object.__setattr__(self, "tx_id", sha256(self.encode()))

    @property
    def message(self) -> bytes:
        return tx_message(self.round, self.cids)

    def encode(self) -> bytes:
        return self.message + self.ring_sig.encode()

    def computed_id(self) -> bytes:
        return sha256(self.encode())

    def verify(self) -> bool:
        return _verify_encoded(self.message, self.ring_sig.encode())

    @classmethod
    def decode(cls, blob: bytes, offset: int = 0) -> tuple["Transaction", int]:
        round_no, n = struct.unpack_from("<QI", blob, offset)
        off = offset + 12
        if n == 0 or off + 32 * n > len(blob):
            raise ValueError("bad cid count")
        cids = tuple(Cid.from_digest(blob[off + 32 * i : off + 32 * (i + 1)]) for i in range(n))
        sig, end = RingSignature.decode_prefix(blob, off + 32 * n)
        return cls(round_no, cids, sig), end


@lru_cache(maxsize=8192)
def _verify_encoded(message: bytes, sig_bytes: bytes) -> bool:
    # verification is a pure function of these bytes, so memoising is safe
    try:
        return ring_verify(message, RingSignature.decode(sig_bytes))
    except MalformedSignature:
        return False


def merkle_root(tx_ids: Sequence[bytes]) -> bytes:
    """Binary Merkle root; odd levels duplicate their last node."""
    if not tx_ids:
        return EMPTY_ROOT
    level = [bytes(h) for h in tx_ids]
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: bytes
    timestamp: int
    merkle_root: bytes
    global_model_cid: Cid

    def encode(self) -> bytes:
        return (
            struct.pack("<Q", self.height)
            + self.prev_hash
            + struct.pack("<Q", self.timestamp)
            + self.merkle_root
            + self.global_model_cid.digest
        )

    ENCODED_LEN = 8 + 32 + 8 + 32 + 32

    @classmethod
    def decode(cls, blob: bytes) -> "BlockHeader":
        if len(blob) != cls.ENCODED_LEN:
            raise ValueError("bad header length")
        (height,) = struct.unpack_from("<Q", blob, 0)
        (ts,) = struct.unpack_from("<Q", blob, 40)
        return cls(height, blob[8:40], ts, blob[48:80], Cid.from_digest(blob[80:112]))


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    body: tuple[Transaction, ...]
    block_hash: bytes

    @property
    def height(self) -> int:
        return self.header.height

    def encode(self) -> bytes:
        """Canonical record: header, stored block hash, then length-prefixed transactions."""
        parts = [self.header.encode(), self.block_hash, struct.pack("<I", len(self.body))]
        for tx in self.body:
            enc = tx.encode()
            parts += [struct.pack("<I", len(enc)), enc, tx.tx_id]
        return b"".join(parts)

    @classmethod
    def decode(cls, blob: bytes) -> "Block":
        n_head = BlockHeader.ENCODED_LEN
        header = BlockHeader.decode(blob[:n_head])
        block_hash = blob[n_head : n_head + 32]
        if len(block_hash) != 32:
            raise ValueError("truncated block hash")
        off = n_head + 32
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        txs = []
        for _ in range(count):
            (length,) = struct.unpack_from("<I", blob, off)
            off += 4
            tx, end = Transaction.decode(blob[off : off + length])
            if end != length:
                raise ValueError("transaction length mismatch")
            off += length
            stored_id = blob[off : off + 32]
            if len(stored_id) != 32:
                raise ValueError("truncated tx id")
            off += 32
            txs.append(Transaction(tx.round, tx.cids, tx.ring_sig, stored_id))
        if off != len(blob):
            raise ValueError("trailing bytes after block")
        return cls(header, tuple(txs), block_hash)


def build_block(
    height: int,
    prev_hash: bytes,
    timestamp: int,
    txs: Iterable[Transaction],
    global_model_cid: Cid,
) -> Block:
    txs = tuple(txs)
    if height > 0 and not txs:
        raise ValueError("only the genesis block may be empty")
    for tx in txs:
        if tx.tx_id != tx.computed_id() or not tx.verify():
            raise InvalidTransaction(tx.tx_id)
    header = BlockHeader(height, bytes(prev_hash), timestamp, merkle_root([t.tx_id for t in txs]), global_model_cid)
    return Block(header, txs, sha256(header.encode()))


def genesis(global_model_cid: Cid) -> Block:
    return build_block(0, ZERO_HASH, 0, (), global_model_cid)


@dataclass(frozen=True)
class ValidationFailure:
    height: int
    reason: str

    def __bool__(self) -> bool:
        return False

    def __str__(self) -> str:
        return f"height {self.height}: {self.reason}"


@dataclass(frozen=True)
class ValidationOk:
    length: int

    def __bool__(self) -> bool:
        return True

    def __str__(self) -> str:
        return f"ok ({self.length} blocks)"


class Chain:
    """Append-only linear chain. Appends are expected from a single writer."""

    def __init__(self, blocks: Iterable[Block] = ()):
        self.blocks: list[Block] = list(blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self):
        return iter(list(self.blocks))

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    def append(self, block: Block) -> None:
        if self.blocks:
            if block.header.prev_hash != self.tip.block_hash or block.height != self.tip.height + 1:
                raise ValueError("block does not extend the tip")
        self.blocks.append(block)

    def snapshot(self) -> "Chain":
        return Chain(self.blocks)


def validate_block(block: Block, prev: Block | None) -> str | None:
    h = block.header
    if prev is None:
        if h.height != 0 or h.prev_hash != ZERO_HASH:
            return "bad-genesis"
    else:
        if h.prev_hash != prev.block_hash:
            return "linkage"
        if h.height != prev.header.height + 1:
            return "height"
        if h.timestamp < prev.header.timestamp:
            return "timestamp"
    if sha256(h.encode()) != block.block_hash:
        return "block-hash-mismatch"
    computed = [tx.computed_id() for tx in block.body]
    if merkle_root(computed) != h.merkle_root:
        return "merkle-mismatch"
    if any(c != tx.tx_id for c, tx in zip(computed, block.body)):
        return "tx-id-mismatch"
    for tx in block.body:
        if not tx.verify():
            return "bad-signature"
    return None


def validate_chain(chain: Chain | Sequence[Block]) -> ValidationOk | ValidationFailure:
    blocks = list(chain)
    prev = None
    for i, block in enumerate(blocks):
        reason = validate_block(block, prev)
        if reason is not None:
            return ValidationFailure(i, reason)
        prev = block
    return ValidationOk(len(blocks))


# newline-delimited hex export

_HEX_LINE = re.compile(r"[0-9a-f]+")


def export_chain(chain: Chain | Sequence[Block]) -> str:
    return "".join(block.encode().hex() + "\n" for block in chain)


def import_chain(text: str) -> Chain:
    if not text:
        raise MalformedChain(0, "empty export")
    if not text.endswith("\n"):
        raise MalformedChain(text.count("\n"), "missing final newline")
    blocks = []
    for i, line in enumerate(text[:-1].split("\n")):
        if not _HEX_LINE.fullmatch(line) or len(line) % 2:
            raise MalformedChain(i, "not lowercase hex")
        try:
            blocks.append(Block.decode(bytes.fromhex(line)))
        except (ValueError, struct.error, MalformedSignature) as exc:
            raise MalformedChain(i, f"undecodable block ({exc})") from exc
    return Chain(blocks)


def validate_export(data: bytes | str) -> ValidationOk | ValidationFailure:
    """Parse and validate an exported chain; parse errors become failures."""
    try:
        text = data.decode("ascii") if isinstance(data, (bytes, bytearray)) else data
        chain = import_chain(text)
    except UnicodeDecodeError:
        return ValidationFailure(0, "malformed: not ascii")
    except MalformedChain as exc:
        return ValidationFailure(exc.line, f"malformed: {exc.reason}")
    return validate_chain(chain)


def write_chain(chain: Chain, path: str | Path) -> None:
    Path(path).write_text(export_chain(chain), encoding="ascii")
