import random

import pytest

from ppbfl.cas import ContentStore
from ppbfl.ledger import Chain, build_block, genesis
from ppbfl.ringmix import KeyPair, MixState, build_mixed_tx


@pytest.fixture(scope="session")
def keys():
    rng = random.Random(2024)
    return [KeyPair.generate(rng) for _ in range(4)]


def make_chain(keys, n_blocks: int, seed: int = 0) -> Chain:
    """Genesis plus ``n_blocks - 1`` blocks of two signed transactions each."""
    rng = random.Random(seed)
    store = ContentStore()
    ring = [k.public for k in keys]
    chain = Chain([genesis(store.put(b"genesis model"))])
    for h in range(1, n_blocks):
        txs = []
        view = MixState()
        for j, signer in enumerate(keys[:2]):
            cid = store.put(f"model {h} {j}".encode())
            tx = build_mixed_tx(cid, view, 0, h, ring, signer, rng)
            txs.append(tx)
        gcid = store.put(f"global {h}".encode())
        chain.append(build_block(h, chain.tip.block_hash, h, txs, gcid))
    return chain


@pytest.fixture(scope="session")
def chain5(keys):
    return make_chain(keys, 5)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
