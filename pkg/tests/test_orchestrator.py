import dataclasses
import math

import numpy as np
import pytest

from ppbfl import orchestrator, tensornet
from ppbfl.cas import ContentStore
from ppbfl.errors import ConfigError, RoundFailed
from ppbfl.ledger import validate_chain, validate_export
from ppbfl.orchestrator import DataConfig, SimConfig, init_state, run_experiment, run_round
from ppbfl.seeding import derive_seed

SMALL = DataConfig(n_classes=3, n_per_class=40, n_features=5, spread=0.2)


def cfg(**kw):
    base = dict(n_trainers=4, rounds=3, data=SMALL, hidden=8, mechanism="none")
    base.update(kw)
    return SimConfig(**base)


def test_two_trainers_no_noise_equals_plain_training():
    c = cfg(n_trainers=2, rounds=1)
    start = init_state(c)
    init_model, shard = start.global_model, start.shards["T02"]
    result = run_experiment(c)
    expected, _ = tensornet.train_local(
        init_model, shard, 1, c.lr, 2.0, derive_seed(0, "train", 1, "T02"), batch_size=c.batch_size
    )
    assert result.state.global_model == expected
    assert result.records[0].aggregator == "T01"


def test_ppbfl_with_budgets_off_equals_none():
    a = run_experiment(cfg(mechanism="none"))
    b = run_experiment(cfg(mechanism="ppbfl", epsilon_local=None, epsilon_global=None))
    assert [r.global_cid for r in a.records] == [r.global_cid for r in b.records]


@pytest.mark.parametrize("consensus", ["potw", "pos"])
def test_chain_valid_after_rounds(consensus):
    result = run_experiment(cfg(mechanism="ppbfl", consensus=consensus, rounds=4))
    chain = result.state.chain
    assert len(chain) == 5
    assert validate_chain(chain)
    assert validate_export(orchestrator.export_chain(chain))
    for rec, block in zip(result.records, chain.blocks[1:]):
        assert block.header.global_model_cid == rec.global_cid


@pytest.mark.parametrize("mix_k", [0, 1, 2])
def test_cid_conservation(mix_k):
    result = run_experiment(cfg(mix_k=mix_k, rounds=4, n_trainers=5))
    for rec in result.records:
        assert set(rec.retrieved_cids) == rec.uploaded_cids == rec.block_cids
        assert len(rec.retrieved_cids) == len(set(rec.retrieved_cids))
        assert all(n == 1 for n in rec.local_fetches.values())


def test_aggregate_is_mean_of_retrieved_models():
    c = cfg(rounds=1)
    store = ContentStore()
    state = init_state(c, store)
    state, rec = run_round(state, c)
    models = [tensornet.deserialize(store.get(cid)) for cid in rec.retrieved_cids]
    stacked = np.stack([m.pools()[0] for m in models])
    expected = sum(stacked) / len(models)
    got = state.global_model.pools()[0]
    scale = np.maximum(np.abs(expected), np.finfo(float).tiny)
    assert np.all(np.abs(got - expected) <= 4 * np.spacing(scale) * len(models))


def test_aggregator_does_not_train():
    result = run_experiment(cfg(rounds=5))
    for rec in result.records:
        assert rec.aggregator not in rec.durations
        assert len(rec.durations) == 3
        assert rec.winner != rec.aggregator


def test_potw_picks_fastest_eligible():
    result = run_experiment(cfg(rounds=6, capacities=(1, 2, 3, 8)))
    # fastest trainer is T04; it alternates with the runner-up because it cannot train while aggregating
    assert [r.aggregator for r in result.records] == ["T01", "T04", "T03", "T04", "T03", "T04"]


def test_budget_accounting():
    result = run_experiment(cfg(mechanism="ppbfl", epsilon_local=0.5, epsilon_global=2.0, rounds=2))
    for rec in result.records:
        local, glob = rec.budgets_spent
        assert local.epsilon == 0.5 and glob.epsilon == 2.0
        assert math.isclose(rec.composed_local.epsilon, 0.5 * len(rec.durations))
    cafl = run_experiment(cfg(mechanism="cafl", epsilon_local=0.5, epsilon_global=2.0, rounds=1))
    assert cafl.records[0].budgets_spent[1] is None


def test_rewards_and_blockchain_only_nodes():
    c = cfg(rounds=4, n_blockchain_only=2)
    result = run_experiment(c)
    stakes = result.stakes()
    assert stakes["B01"] == stakes["B02"] == 0.0
    assert sum(stakes.values()) == 4 * (2.0 + 3 * 1.0)


def test_determinism_and_parallel():
    a = run_experiment(cfg(mechanism="ppbfl", rounds=2))
    b = run_experiment(cfg(mechanism="ppbfl", rounds=2, parallel=3))
    assert a.accuracies == b.accuracies
    assert orchestrator.export_chain(a.state.chain) == orchestrator.export_chain(b.state.chain)
    c = run_experiment(cfg(mechanism="ppbfl", rounds=2, master_seed=1))
    assert [r.global_cid for r in a.records] != [r.global_cid for r in c.records]


def test_round_failure_names_step():
    c = cfg(rounds=1)
    state = init_state(c)
    state.store = ContentStore()  # global model missing, so downloads fail
    with pytest.raises(RoundFailed) as info:
        run_round(state, c)
    assert info.value.round == 1 and info.value.step == "local training"


def test_label_shard_partition_runs():
    result = run_experiment(cfg(partition_mode="label-shard", rounds=1))
    assert 0.0 <= result.final_accuracy <= 1.0


@pytest.mark.parametrize(
    "kw",
    [
        dict(rounds=0),
        dict(n_trainers=1),
        dict(mechanism="bogus"),
        dict(epsilon_local=0.0),
        dict(mix_k=-1),
        dict(capacities=(1, 2)),
        dict(ring_size=1),
    ],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        cfg(**kw)


def test_ring_size_limits_ring():
    result = run_experiment(cfg(ring_size=2, rounds=1, n_trainers=5))
    for tx in result.state.chain.tip.body:
        assert len(tx.ring_sig.ring) == 2


def test_write_outputs(tmp_path):
    result = run_experiment(cfg(rounds=2))
    orchestrator.write_outputs(result, tmp_path)
    acc = (tmp_path / "accuracy.csv").read_text().splitlines()
    assert acc[0] == ",".join(orchestrator.ACCURACY_COLUMNS) and len(acc) == 3
    assert acc[1].startswith("none,potw,iid,off,off,1,")
    assert validate_export((tmp_path / "chain.log").read_bytes())
    assert dataclasses.is_dataclass(result.config)
