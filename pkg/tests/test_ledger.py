import dataclasses
import hashlib
import random

import pytest

from conftest import make_chain
from ppbfl.cas import Cid
from ppbfl.errors import InvalidTransaction, MalformedChain
from ppbfl.ledger import (
    EMPTY_ROOT,
    ZERO_HASH,
    Block,
    Chain,
    Transaction,
    build_block,
    export_chain,
    genesis,
    import_chain,
    merkle_root,
    validate_chain,
    validate_export,
)
from ppbfl.ringsig import RingSignature

H1, H2, H3 = bytes(range(32)), bytes(range(32, 64)), bytes(range(64, 96))
# openssl dgst -sha256 over the concatenated leaves, computed outside Python
THREE_LEAF_ROOT = "c64254d82dcf4116ee5adfe54e156e65c18ee6c9397da8300f69d547f15316a6"


def sha(b):
    return hashlib.sha256(b).digest()


def test_merkle_small_trees():
    assert merkle_root([]) == EMPTY_ROOT
    assert merkle_root([H1]) == H1
    assert merkle_root([H1, H2]) == sha(H1 + H2)
    assert merkle_root([H1, H2, H3]).hex() == THREE_LEAF_ROOT


def test_merkle_order_sensitive():
    assert merkle_root([H1, H2, H3]) != merkle_root([H2, H1, H3])


def test_genesis():
    g = genesis(Cid.of(b"m0"))
    assert g.height == 0 and g.header.prev_hash == ZERO_HASH and g.body == ()


def test_block_determinism_and_order(chain5):
    b = chain5.blocks[1]
    again = build_block(1, b.header.prev_hash, 1, b.body, b.header.global_model_cid)
    assert again.block_hash == b.block_hash
    flipped = build_block(1, b.header.prev_hash, 1, b.body[::-1], b.header.global_model_cid)
    assert flipped.header.merkle_root != b.header.merkle_root


def test_build_block_rejects_bad_tx(chain5):
    tx = chain5.blocks[1].body[0]
    forged = Transaction(tx.round + 1, tx.cids, tx.ring_sig)
    with pytest.raises(InvalidTransaction):
        build_block(1, ZERO_HASH, 1, [forged], Cid.of(b""))


def test_valid_chain(chain5):
    assert validate_chain(chain5)
    assert len(chain5) == 5


def _replace_block(chain, i, block):
    blocks = list(chain.blocks)
    blocks[i] = block
    return Chain(blocks)


def test_tampered_cid_detected(chain5):
    blk = chain5.blocks[3]
    tx = blk.body[0]
    bad_tx = dataclasses.replace(tx, cids=(Cid.of(b"evil"),) + tx.cids[1:])
    bad = _replace_block(chain5, 3, dataclasses.replace(blk, body=(bad_tx,) + blk.body[1:]))
    result = validate_chain(bad)
    assert not result and result.height == 3 and result.reason == "merkle-mismatch"


def test_tampered_timestamp_detected(chain5):
    blk = chain5.blocks[2]
    header = dataclasses.replace(blk.header, timestamp=blk.header.timestamp + 7)
    bad = _replace_block(chain5, 2, dataclasses.replace(blk, header=header))
    result = validate_chain(bad)
    assert not result and result.height == 2 and result.reason == "block-hash-mismatch"

    rehashed = _replace_block(chain5, 2, dataclasses.replace(blk, header=header, block_hash=sha(header.encode())))
    result = validate_chain(rehashed)
    assert not result and result.height == 3 and result.reason == "linkage"


def test_append_preserves_validity(keys, chain5):
    chain = make_chain(keys, 5)
    tip = chain.tip
    chain.append(build_block(5, tip.block_hash, 5, tip.body, Cid.of(b"g5")))
    assert validate_chain(chain)
    with pytest.raises(ValueError):
        chain.append(build_block(9, tip.block_hash, 9, tip.body, Cid.of(b"g9")))


def test_export_roundtrip(chain5):
    text = export_chain(chain5)
    assert text.count("\n") == 5
    back = import_chain(text)
    assert [b.encode() for b in back] == [b.encode() for b in chain5]
    assert validate_chain(back)


def test_block_decode_roundtrip(chain5):
    for b in chain5:
        assert Block.decode(b.encode()) == b


def test_import_rejects_garbage():
    with pytest.raises(MalformedChain):
        import_chain("")
    with pytest.raises(MalformedChain):
        import_chain("zz\n")
    with pytest.raises(MalformedChain):
        import_chain("ABCD\n")


def test_every_single_bit_flip_detected(chain5):
    """Strided bit flips across both records of a two-block export."""
    lines = [b.encode() for b in chain5.blocks[:2]]
    for which in range(2):
        for i in range(0, len(lines[which]), 7):
            for bit in (0, 5):
                mutated = [bytearray(l) for l in lines]
                mutated[which][i] ^= 1 << bit
                text = "".join(bytes(m).hex() + "\n" for m in mutated)
                assert not validate_export(text), (which, i, bit)


def test_random_byte_mutations_of_export(chain5):
    data = export_chain(chain5).encode()
    rng = random.Random(5)
    for _ in range(50):
        i = rng.randrange(len(data))
        v = rng.choice([b for b in range(256) if b != data[i]])
        mutated = data[:i] + bytes([v]) + data[i + 1 :]
        assert not validate_export(mutated)


def test_signature_encoding_fixed_width(chain5):
    sig = chain5.blocks[1].body[0].ring_sig
    assert len(sig.encode()) == RingSignature.encoded_length(len(sig.ring))
