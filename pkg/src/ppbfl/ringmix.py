"""CID mixing: each trainer hides its own CID among CIDs seen from others."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Sequence

from .cas import Cid
from .errors import BadKey, NotEnoughObserved, RejectedTx
from .ledger import Transaction, tx_message
from .ringsig import KeyPair, RingSignature, ring_sign, ring_verify

__all__ = [
    "KeyPair",
    "MixState",
    "RingSignature",
    "build_mixed_tx",
    "ingest_tx",
    "ring_sign",
    "ring_verify",
]


@dataclass(frozen=True)
class MixState:
    seen_cids: frozenset[Cid] = field(default_factory=frozenset)
    pending: tuple[Transaction, ...] = ()

    def foreign(self, own: Cid) -> list[Cid]:
        return sorted(self.seen_cids - {own})


def ingest_tx(state: MixState, tx: Transaction) -> tuple[MixState, list[Cid]]:
    """Accept a verified transaction; return CIDs not seen before, in tx order."""
    if not tx.verify():
        raise RejectedTx(f"transaction {tx.tx_id.hex()} fails ring verification")
    fresh: list[Cid] = []
    for cid in tx.cids:
        if cid not in state.seen_cids and cid not in fresh:
            fresh.append(cid)
    return MixState(state.seen_cids | frozenset(fresh), state.pending + (tx,)), fresh


def build_mixed_tx(
    own_cid: Cid,
    observed: MixState,
    k: int,
    round_no: int,
    ring: Sequence[int],
    signer: KeyPair,
    rng: random.Random,
) -> Transaction:
    """Bundle ``own_cid`` with ``k`` foreign CIDs, shuffle, and ring-sign."""
    pool = observed.foreign(own_cid)
    if k < 0 or k > len(pool):
        raise NotEnoughObserved(f"asked for {k} foreign cids, {len(pool)} observed")
    cids = [own_cid, *rng.sample(pool, k)]
    rng.shuffle(cids)
    try:
        idx = list(ring).index(signer.public)
    except ValueError:
        raise BadKey("signer's public key is not in the ring") from None
    sig = ring_sign(tx_message(round_no, cids), ring, idx, signer.secret, rng)
    return Transaction(round_no, tuple(cids), sig)
