"""End-to-end simulation of blockchain-backed federated learning rounds.

One round, in order:

1. every trainer except the current aggregator downloads the global model by
   CID and trains on its shard;
2. trainers perturb their model, upload it, and broadcast a mixed,
   ring-signed transaction;
3. the aggregator ingests transactions, fetches each distinct CID once, and
   the round's training reports elect the next aggregator;
4. models are averaged, the aggregate optionally receives global noise, and
   the result is uploaded;
5. the aggregator packages the round's transactions and the global CID into
   a block.

Every random stream is derived from ``master_seed`` plus a key naming its
purpose, round, and node, so results do not depend on thread scheduling.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

from . import consensus, dp, tensornet
from .cas import Cid, ContentStore
from .consensus import PACKAGING_REWARD, PARTICIPATION_REWARD
from .data import Dataset, PartitionPlan, load_idx, partition, synth_blobs, train_test_split
from .errors import ConfigError, RoundFailed
from .ledger import Chain, Transaction, build_block, export_chain, genesis
from .ringmix import KeyPair, MixState, build_mixed_tx, ingest_tx
from .seeding import derive_seed, np_stream, py_stream
from .tensornet import ModelParams, TrainReport

log = logging.getLogger(__name__)

MechanismName = Literal["ppbfl", "cafl", "none"]
ConsensusName = Literal["potw", "pos"]


@dataclass(frozen=True)
class DataConfig:
    kind: Literal["blobs", "idx"] = "blobs"
    n_classes: int = 10
    n_per_class: int = 400
    n_features: int = 20
    spread: float = 0.25
    test_fraction: float = 0.25
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    limit: int | None = None


@dataclass(frozen=True)
class SimConfig:
    n_trainers: int = 10
    n_blockchain_only: int = 0
    rounds: int = 30
    epsilon_local: float | None = 1.0
    epsilon_global: float | None = 1.0
    mechanism: MechanismName = "ppbfl"
    consensus: ConsensusName = "potw"
    partition_mode: Literal["iid", "label-shard"] = "iid"
    shards_per_client: int = 2
    data: DataConfig = field(default_factory=DataConfig)
    hidden: int = 32
    lr: float = tensornet.DEFAULT_LR
    batch_size: int = tensornet.DEFAULT_BATCH_SIZE
    local_epochs: int = 1
    mix_k: int = 1
    ring_size: int | None = None
    capacities: tuple[float, ...] | None = None
    packaging_reward: float = PACKAGING_REWARD
    participation_reward: float = PARTICIPATION_REWARD
    master_seed: int = 0
    parallel: int = 1
    wall_clock: bool = False

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.n_trainers < 2:
            raise ConfigError("n_trainers must be >= 2")
        if self.n_blockchain_only < 0:
            raise ConfigError("n_blockchain_only must be >= 0")
        if self.mechanism not in ("ppbfl", "cafl", "none"):
            raise ConfigError(f"unknown mechanism {self.mechanism!r}")
        if self.consensus not in ("potw", "pos"):
            raise ConfigError(f"unknown consensus {self.consensus!r}")
        if self.partition_mode not in ("iid", "label-shard"):
            raise ConfigError(f"unknown partition mode {self.partition_mode!r}")
        for name in ("epsilon_local", "epsilon_global"):
            eps = getattr(self, name)
            if eps is not None and not eps > 0:
                raise ConfigError(f"{name} must be positive or off")
        if self.mix_k < 0:
            raise ConfigError("mix_k must be >= 0")
        if self.ring_size is not None and self.ring_size < 2:
            raise ConfigError("ring_size must be >= 2")
        if self.capacities is not None:
            if len(self.capacities) != self.n_trainers or any(c <= 0 for c in self.capacities):
                raise ConfigError("capacities needs one positive value per trainer")
            object.__setattr__(self, "capacities", tuple(float(c) for c in self.capacities))
        if self.parallel < 1:
            raise ConfigError("parallel must be >= 1")

    @property
    def trainer_ids(self) -> list[str]:
        width = max(2, len(str(self.n_trainers)))
        return [f"T{i:0{width}d}" for i in range(1, self.n_trainers + 1)]

    @property
    def blockchain_only_ids(self) -> list[str]:
        width = max(2, len(str(self.n_blockchain_only)))
        return [f"B{i:0{width}d}" for i in range(1, self.n_blockchain_only + 1)]

    def trainer_capacities(self) -> list[float]:
        if self.capacities is not None:
            return list(self.capacities)
        return [float(i) for i in range(1, self.n_trainers + 1)]

    def local_budget(self) -> dp.PrivacyBudget | None:
        if self.mechanism == "none" or self.epsilon_local is None:
            return None
        return dp.PrivacyBudget(self.epsilon_local)

    def global_budget(self) -> dp.PrivacyBudget | None:
        if self.mechanism != "ppbfl" or self.epsilon_global is None:
            return None
        return dp.PrivacyBudget(self.epsilon_global)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    global_cid: Cid
    test_accuracy: float
    winner: str
    aggregator: str
    durations: dict[str, float]
    budgets_spent: tuple[dp.PrivacyBudget | None, dp.PrivacyBudget | None]
    composed_local: dp.PrivacyBudget | None
    uploaded_cids: frozenset[Cid]
    retrieved_cids: tuple[Cid, ...]
    block_cids: frozenset[Cid]
    local_fetches: dict[Cid, int]


@dataclass
class SimState:
    round: int
    store: ContentStore
    chain: Chain
    global_model: ModelParams
    global_cid: Cid
    profiles: list[consensus.NodeProfile]
    aggregator: str
    keys: dict[str, KeyPair]
    shards: dict[str, Dataset]
    test: Dataset
    stake_log: list[dict] = field(default_factory=list)

    def profile(self, node_id: str) -> consensus.NodeProfile:
        return next(p for p in self.profiles if p.node_id == node_id)


def load_data(cfg: DataConfig, seed: int) -> tuple[Dataset, Dataset]:
    if cfg.kind == "blobs":
        full = synth_blobs(cfg.n_classes, cfg.n_per_class, cfg.n_features, cfg.spread, seed)
        return train_test_split(full, cfg.test_fraction, derive_seed(seed, "holdout"))
    if cfg.kind == "idx":
        paths = (cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels)
        if any(p is None for p in paths):
            raise ConfigError("idx data needs train/test image and label paths")
        train = load_idx(cfg.train_images, cfg.train_labels, cfg.n_classes)
        test = load_idx(cfg.test_images, cfg.test_labels, cfg.n_classes)
        if cfg.limit:
            train = train.subset(range(min(cfg.limit, len(train))))
            test = test.subset(range(min(cfg.limit, len(test))))
        return train, test
    raise ConfigError(f"unknown data kind {cfg.kind!r}")


def init_state(config: SimConfig, store: ContentStore | None = None) -> SimState:
    """Bootstrap: build data and keys, upload the initial model, package genesis."""
    seed = config.master_seed
    train, test = load_data(config.data, derive_seed(seed, "data"))
    ids = config.trainer_ids
    plan = PartitionPlan(config.partition_mode, config.n_trainers, config.shards_per_client, derive_seed(seed, "partition"))
    shards = dict(zip(ids, partition(train, plan)))

    schema = tensornet.dense_schema(train.n_features, config.hidden, train.n_classes)
    model = tensornet.init_model(schema, derive_seed(seed, "init"))
    store = store if store is not None else ContentStore()
    cid = store.put(tensornet.serialize(model))

    keys = {nid: KeyPair.generate(py_stream(seed, "key", nid)) for nid in ids}
    profiles = [consensus.NodeProfile(nid, "trainer", cap) for nid, cap in zip(ids, config.trainer_capacities())]
    profiles += [consensus.NodeProfile(nid, "blockchain-only", 1.0) for nid in config.blockchain_only_ids]

    if config.consensus == "pos":
        aggregator, profiles = consensus.pos_elect(profiles, py_stream(seed, "pos", 0))
    else:
        aggregator = ids[0]
    return SimState(0, store, Chain([genesis(cid)]), model, cid, profiles, aggregator, keys, shards, test)


def _ring_for(config: SimConfig, state: SimState, signer: str, members: list[str], round_no: int) -> list[int]:
    if config.ring_size is None or config.ring_size >= len(members):
        chosen = members
    else:
        others = [m for m in members if m != signer]
        rng = py_stream(config.master_seed, "ring", round_no, signer)
        chosen = sorted([signer, *rng.sample(others, config.ring_size - 1)])
    return [state.keys[m].public for m in chosen]


def _train_one(config: SimConfig, state: SimState, node_id: str, round_no: int) -> tuple[TrainReport, bytes]:
    seed = config.master_seed
    downloaded = tensornet.deserialize(state.store.get(state.global_cid))
    local, report = tensornet.train_local(
        downloaded,
        state.shards[node_id],
        config.local_epochs,
        config.lr,
        state.profile(node_id).capacity,
        derive_seed(seed, "train", round_no, node_id),
        batch_size=config.batch_size,
        node_id=node_id,
        round=round_no,
        wall_clock=config.wall_clock,
    )
    budget = config.local_budget()
    if budget is not None:
        rng = np_stream(seed, "ldp", round_no, node_id)
        if config.mechanism == "ppbfl":
            local = dp.perturb_model(local, downloaded, budget, "local", rng)
        else:
            local = dp.perturb_model(local, None, budget, "cafl", rng)
    return report, tensornet.serialize(local)


def run_round(state: SimState, config: SimConfig) -> tuple[SimState, RoundRecord]:
    round_no = state.round + 1
    seed = config.master_seed
    aggregator = state.aggregator
    trainers = [p.node_id for p in state.profiles if p.is_trainer and p.node_id != aggregator]

    step = "local training"
    try:
        if config.parallel > 1:
            with ThreadPoolExecutor(max_workers=config.parallel) as pool:
                results = list(pool.map(lambda nid: _train_one(config, state, nid, round_no), trainers))
        else:
            results = [_train_one(config, state, nid, round_no) for nid in trainers]
        reports = {nid: rep for nid, (rep, _) in zip(trainers, results)}

        step = "upload and mixing"
        own = {nid: state.store.put(blob) for nid, (_, blob) in zip(trainers, results)}
        arrival = sorted(trainers)
        py_stream(seed, "arrival", round_no).shuffle(arrival)
        # every registered trainer is a ring member, so a single active trainer still has cover
        members = sorted(p.node_id for p in state.profiles if p.is_trainer)
        bus = MixState()
        txs: list[Transaction] = []
        for nid in arrival:
            k = min(config.mix_k, len(bus.foreign(own[nid])))
            ring = _ring_for(config, state, nid, members, round_no)
            tx = build_mixed_tx(own[nid], bus, k, round_no, ring, state.keys[nid], py_stream(seed, "mix", round_no, nid))
            bus, _ = ingest_tx(bus, tx)
            txs.append(tx)

        step = "retrieval"
        before = {cid: state.store.fetch_counts[cid] for cid in own.values()}
        view = MixState()
        retrieved: list[Cid] = []
        models: list[ModelParams] = []
        for tx in txs:
            view, fresh = ingest_tx(view, tx)
            for cid in fresh:
                models.append(tensornet.deserialize(state.store.get(cid)))
                retrieved.append(cid)
        local_fetches = {cid: state.store.fetch_counts[cid] - before[cid] for cid in own.values()}

        step = "election"
        report_list = tuple(reports[nid] for nid in sorted(reports))
        if config.consensus == "potw":
            winner = consensus.potw_elect(report_list, previous_winner=aggregator)
            profiles = state.profiles
        else:
            accrued = {nid: 1.0 for nid in reports}
            winner, profiles = consensus.pos_elect(state.profiles, py_stream(seed, "pos", round_no), accrued)
        outcome = consensus.RoundOutcome(
            round_no,
            winner,
            report_list,
            config.packaging_reward,
            aggregator,
            config.participation_reward,
        )
        profiles = consensus.apply_rewards(outcome, profiles)

        step = "aggregation"
        aggregate = tensornet.average(models)
        gbudget = config.global_budget()
        if gbudget is not None:
            aggregate = dp.perturb_model(aggregate, None, gbudget, "global", np_stream(seed, "gdp", round_no))
        global_cid = state.store.put(tensornet.serialize(aggregate))

        step = "block packaging"
        block = build_block(round_no, state.chain.tip.block_hash, round_no, txs, global_cid)
        state.chain.append(block)
    except RoundFailed:
        raise
    except Exception as exc:
        raise RoundFailed(round_no, step, exc) from exc

    lbudget = config.local_budget()
    state.round = round_no
    state.global_model = aggregate
    state.global_cid = global_cid
    state.profiles = profiles
    state.aggregator = winner
    state.stake_log.extend(consensus.stake_rows(round_no, profiles, aggregator))

    accuracy = tensornet.evaluate(aggregate, state.test)
    record = RoundRecord(
        round=round_no,
        global_cid=global_cid,
        test_accuracy=accuracy,
        winner=winner,
        aggregator=aggregator,
        durations={nid: reports[nid].duration for nid in sorted(reports)},
        budgets_spent=(lbudget, gbudget),
        composed_local=dp.compose_budgets([lbudget] * len(trainers)) if lbudget else None,
        uploaded_cids=frozenset(own.values()),
        retrieved_cids=tuple(retrieved),
        block_cids=frozenset(c for tx in block.body for c in tx.cids),
        local_fetches=local_fetches,
    )
    log.info("round %d: acc=%.4f aggregator=%s next=%s", round_no, accuracy, aggregator, winner)
    return state, record


@dataclass
class ExperimentResult:
    config: SimConfig
    records: list[RoundRecord]
    state: SimState

    @property
    def accuracies(self) -> list[float]:
        return [r.test_accuracy for r in self.records]

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].test_accuracy

    def stakes(self) -> dict[str, float]:
        return {p.node_id: p.stake for p in self.state.profiles}

    def summary(self) -> dict:
        return {
            "rounds": len(self.records),
            "final_accuracy": self.final_accuracy,
            "best_accuracy": max(self.accuracies),
            "chain_length": len(self.state.chain),
            "stakes": self.stakes(),
        }


def run_experiment(config: SimConfig, store: ContentStore | None = None) -> ExperimentResult:
    state = init_state(config, store)
    records = []
    for _ in range(config.rounds):
        state, record = run_round(state, config)
        records.append(record)
    return ExperimentResult(config, records, state)


# CSV output

ACCURACY_COLUMNS = ["mechanism", "consensus", "partition", "epsilon_local", "epsilon_global", "round", "accuracy"]
ROUND_COLUMNS = ["round", "accuracy", "aggregator", "winner", "global_cid", "durations"]


def fmt_eps(eps: float | None) -> str:
    return "off" if eps is None else repr(float(eps))


def applied_epsilons(config: SimConfig) -> tuple[str, str]:
    """Budgets actually spent, formatted; a budget the mechanism ignores reads "off"."""
    local, glob = config.local_budget(), config.global_budget()
    return fmt_eps(local and local.epsilon), fmt_eps(glob and glob.epsilon)


def accuracy_rows(result: ExperimentResult) -> list[dict]:
    c = result.config
    eps_local, eps_global = applied_epsilons(c)
    return [
        {
            "mechanism": c.mechanism,
            "consensus": c.consensus,
            "partition": c.partition_mode,
            "epsilon_local": eps_local,
            "epsilon_global": eps_global,
            "round": r.round,
            "accuracy": repr(r.test_accuracy),
        }
        for r in result.records
    ]


def round_rows(result: ExperimentResult) -> list[dict]:
    return [
        {
            "round": r.round,
            "accuracy": repr(r.test_accuracy),
            "aggregator": r.aggregator,
            "winner": r.winner,
            "global_cid": r.global_cid.text,
            "durations": ";".join(f"{k}={v!r}" for k, v in r.durations.items()),
        }
        for r in result.records
    ]


def to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def write_outputs(result: ExperimentResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "accuracy.csv").write_text(to_csv(accuracy_rows(result), ACCURACY_COLUMNS))
    (out / "rounds.csv").write_text(to_csv(round_rows(result), ROUND_COLUMNS))
    (out / "stake.csv").write_text(consensus.stake_csv(result.state.stake_log))
    (out / "chain.log").write_text(export_chain(result.state.chain), encoding="ascii")
